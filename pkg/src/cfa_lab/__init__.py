"""Desk-scale heterogeneous multi-agent collaborative perception lab.

Synthetic bird's-eye-view worlds, per-agent perception models with
incompatible feature domains, and a shared protocol feature domain into
which lightweight adapter/reverter pairs translate, so that agents with
different encoders, tasks, and feature shapes can still fuse each
other's features.
"""

__version__ = "0.1.0"
