"""Dataset construction: IDX images, contamination mixes, poisoning and log-session corpora."""

from dpanomaly.data.idx import IdxFormatError, read_idx, write_idx
from dpanomaly.data.images import (
    NORMAL,
    OUTLIER,
    POISONED,
    DigitStyle,
    GlyphStyle,
    ImageDataset,
    PoisonSpec,
    SpecError,
    apply_trigger,
    build_nd_test,
    build_outlier_mix,
    load_idx,
    poison,
    render_digits,
    render_glyphs,
    stratified_subsample,
)
from dpanomaly.data.sequences import (
    SequenceCorpus,
    SyntheticLogModel,
    gen_sessions,
    hdfs_like_model,
    load_sequences,
    window_sequences,
    write_sequences,
)

__all__ = [
    "NORMAL",
    "OUTLIER",
    "POISONED",
    "DigitStyle",
    "GlyphStyle",
    "IdxFormatError",
    "ImageDataset",
    "PoisonSpec",
    "SequenceCorpus",
    "SpecError",
    "SyntheticLogModel",
    "apply_trigger",
    "build_nd_test",
    "build_outlier_mix",
    "gen_sessions",
    "hdfs_like_model",
    "load_idx",
    "load_sequences",
    "poison",
    "read_idx",
    "render_digits",
    "render_glyphs",
    "stratified_subsample",
    "window_sequences",
    "write_idx",
    "write_sequences",
]
