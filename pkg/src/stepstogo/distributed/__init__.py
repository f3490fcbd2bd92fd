"""Multi-process Stage 2: coordinator, replay server, reward server, learner, actors.

Every role is a separate process talking length-prefixed JSON over TCP
(see :mod:`.wire`).  ``launch_local`` starts a whole deployment on one host.
"""
from .launch import launch_local, query_status, send_operator_abort

__all__ = ["launch_local", "query_status", "send_operator_abort"]
