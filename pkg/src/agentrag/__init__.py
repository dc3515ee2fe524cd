"""Multi-turn search agent rollout engine with BM25 retrieval, rewards and GRPO trace math."""

__version__ = "0.1.0"
