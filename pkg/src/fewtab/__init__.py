"""Few-shot tabular learning from unlabeled tables.

Self-generates supervised tasks from unlabeled rows by clustering randomly
selected column subsets, meta-trains a prototype-based MLP encoder over
those tasks, selects hyperparameters and stopping points with an
unsupervised validation score, and adapts to real few-shot classification
and regression problems.
"""

__version__ = "0.1.0"

from .errors import FewtabError

__all__ = ["FewtabError", "__version__"]
