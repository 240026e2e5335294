"""Test-only fault injection.

Negative controls switch these on to prove that a regression check can fail.
Nothing outside the test suite and the validation negative controls should
touch this module.

Known faults:

``backward_sign_flip``          negate the loss gradient entering backprop
``reset_on_session_end_only``   recompute reset masks only when a session ends
``sample_after_scoring``        score every item, then pick the sampled columns
``dropout_keep_probability``    read the dropout rate as a keep probability
``double_softmax``              apply softmax twice before cross-entropy
``bpr_max_wrong_equation``      BPR-max without the softmax weighting of negatives
``large_initial_accumulator``   start Adagrad accumulators at 0.1
``hard_coded_batch_size``       ignore the configured batch size
"""

from __future__ import annotations

from contextlib import contextmanager

KNOWN = frozenset(
    {
        "backward_sign_flip",
        "reset_on_session_end_only",
        "sample_after_scoring",
        "dropout_keep_probability",
        "double_softmax",
        "bpr_max_wrong_equation",
        "large_initial_accumulator",
        "hard_coded_batch_size",
    }
)

_active: set[str] = set()


def active(name: str) -> bool:
    return name in _active


@contextmanager
def inject(*names: str):
    unknown = set(names) - KNOWN
    if unknown:
        raise KeyError(f"unknown faults {sorted(unknown)}")
    added = set(names) - _active
    _active.update(added)
    try:
        yield
    finally:
        _active.difference_update(added)
