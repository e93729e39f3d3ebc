"""Terminal-tool corpus search agent harness and evaluation toolkit.

An agent searches a raw local corpus through sandboxed terminal-style tools
(bash, read, grep) under configurable runtime context-management policies;
recorded trajectories are scored with coverage/localization metrics, an LLM
judge, NDCG@10, and cost accounting. A BM25-backed search tool provides the
retriever-mediated interface for comparisons.
"""

__version__ = "0.1.0"
