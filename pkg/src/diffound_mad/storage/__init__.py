"""File-backed stores for runs, datasets and score files."""

from diffound_mad.storage.dataset_store import Dataset, DatasetStore
from diffound_mad.storage.run_store import RunStore

__all__ = ["Dataset", "DatasetStore", "RunStore"]
