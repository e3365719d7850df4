"""Captioning with cascaded revision: a captioner that flags its own
ambiguous words and revises them against detector output, exercised end to
end on a synthetic vision-language world."""

__version__ = "0.1.0"

# Single-threaded BLAS: the matrices here are small enough that thread
# fan-out costs more than it saves, and one thread keeps results identical
# across machines. Scene-level parallelism (--jobs) layers on top.
try:
    from threadpoolctl import threadpool_limits as _threadpool_limits

    _BLAS_LIMIT = _threadpool_limits(limits=1, user_api="blas")
except Exception:  # pragma: no cover - threadpoolctl is optional
    _BLAS_LIMIT = None
