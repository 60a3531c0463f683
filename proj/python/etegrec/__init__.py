"""Python bindings for the etegrec C++ core."""

from ._etegrec import (  # noqa: F401
    EtegrecError,
    Tokenizer,
    assignment_distribution,
    combine_tokenizer_objective,
    default_config,
    ndcg_at_k,
    psa_loss,
    rec_loss,
    recall_at_k,
    resolve_config,
    synthetic_experiment,
)
