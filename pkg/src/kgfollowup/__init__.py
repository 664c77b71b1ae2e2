"""Knowledge-graph-augmented follow-up question generation and weighted-recall evaluation."""

from .data import BenchmarkInstance, Conversation, FollowupQuestion, QuestionSet
from .kg import KGEdge, KGNode, KnowledgeGraph, load_graph
from .pipeline import PipelineConfig, run_pipeline

__all__ = [
    "BenchmarkInstance",
    "Conversation",
    "FollowupQuestion",
    "KGEdge",
    "KGNode",
    "KnowledgeGraph",
    "PipelineConfig",
    "QuestionSet",
    "load_graph",
    "run_pipeline",
]

__version__ = "0.1.0"
