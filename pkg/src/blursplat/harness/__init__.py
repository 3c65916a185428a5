"""Benchmark construction, metrics, spectral analysis and the oracle prior service."""

from ..metrics import PSNR_CLAMP, psnr, ssim
from .benchmark import Benchmark, BenchmarkError, BenchmarkSpec, build_benchmark, load_benchmark, save_benchmark
from .spectrum import SpectrumProfile, radial_spectrum

__all__ = [
    "PSNR_CLAMP",
    "Benchmark",
    "BenchmarkError",
    "BenchmarkSpec",
    "SpectrumProfile",
    "build_benchmark",
    "load_benchmark",
    "psnr",
    "radial_spectrum",
    "save_benchmark",
    "ssim",
]
