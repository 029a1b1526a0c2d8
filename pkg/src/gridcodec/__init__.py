"""Binarized hash-grid feature field codec and trainer."""

__version__ = "0.1.0"

# Lazy re-exports: the CLI pins the BLAS thread count before numpy loads, so
# importing this package must not pull in the numeric modules eagerly.
_EXPORTS = {
    "FieldCompressor": "compressor",
    "TrainConfig": "model",
    "build_model": "model",
    "decode_model": "codec",
    "encode_model": "codec",
    "evaluate_psnr": "field",
    "rd_sweep": "field",
    "synth_field": "field",
    "train": "field",
}

__all__ = [*_EXPORTS, "__version__"]


def __getattr__(name):
    if name in _EXPORTS:
        from importlib import import_module

        return getattr(import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
