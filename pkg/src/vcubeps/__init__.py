"""VCube-PS: causally ordered topic pub/sub over per-publisher hypercube trees.

Modules: :mod:`topology` (VCube clusters and children), :mod:`protocol` (node
automaton), :mod:`simnet` (deterministic discrete-event network),
:mod:`baselines` (single-root-per-topic trees), :mod:`oracle` (trace checkers)
and :mod:`experiments` (scenarios, metrics, presets).
"""

from .protocol import Kind, Message, MsgId, VCubeNode, ViewEntry, bootstrap_topic
from .simnet import DelayModel, Simulator, TraceRecord
from .topology import HypercubeConfig, children, cluster_members

__version__ = "0.1.0"

__all__ = [
    "DelayModel",
    "HypercubeConfig",
    "Kind",
    "Message",
    "MsgId",
    "Simulator",
    "TraceRecord",
    "VCubeNode",
    "ViewEntry",
    "bootstrap_topic",
    "children",
    "cluster_members",
]
