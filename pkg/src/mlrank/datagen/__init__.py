from .idx import IdxFormatError, load_mnist, parse_idx, surrogate_mnist, write_idx
from .io import read_dataset, write_dataset
from .rmnist import LayoutError, RankedMnistConfig, compose_ranked_mnist, image_features
from .tabular import TabularConfig, TabularWorld, gated_ranking, gen_tabular, ranks_from_significance

__all__ = [
    "IdxFormatError",
    "LayoutError",
    "RankedMnistConfig",
    "TabularConfig",
    "TabularWorld",
    "compose_ranked_mnist",
    "gated_ranking",
    "gen_tabular",
    "image_features",
    "load_mnist",
    "parse_idx",
    "ranks_from_significance",
    "read_dataset",
    "surrogate_mnist",
    "write_dataset",
    "write_idx",
]
