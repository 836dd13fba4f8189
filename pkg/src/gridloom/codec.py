"""Grid world states and the invertible latent codec.

A Grid is an 8x8 field of palette color indices. Two encodings feed the
model: a continuous one (each cell mapped to a fixed unit codeword in
latent space, used by the generation pathway) and a discrete one (one
pixel token per cell, used by the understanding pathway). The codebook
rows are orthonormal, so round-trips are exact and any per-cell
perturbation of norm below sqrt(2)/2 still decodes to the right color.
"""

from dataclasses import dataclass

import numpy as np

from . import vocab
from .rng import make_rng

D_LAT = 8

_CODEBOOK_SEED = 90210


@dataclass(frozen=True)
class Grid:
    """Palette-indexed raster, row-major."""

    cells: tuple  # tuple of tuples, cells[r][c] in [0, PALETTE_SIZE)

    @property
    def height(self) -> int:
        return len(self.cells)

    @property
    def width(self) -> int:
        return len(self.cells[0])

    def __post_init__(self):
        for row in self.cells:
            for v in row:
                if not 0 <= v < vocab.PALETTE_SIZE:
                    raise ValueError(f"cell value {v} outside palette")

    @staticmethod
    def from_array(arr) -> "Grid":
        return Grid(tuple(tuple(int(v) for v in row) for row in arr))

    def to_array(self) -> np.ndarray:
        return np.array(self.cells, dtype=np.int64)

    @staticmethod
    def blank(height: int = vocab.GRID_SIZE, width: int = vocab.GRID_SIZE) -> "Grid":
        return Grid(tuple(tuple(0 for _ in range(width)) for _ in range(height)))

    def with_cell(self, row: int, col: int, color: int) -> "Grid":
        arr = self.to_array()
        arr[row, col] = color
        return Grid.from_array(arr)

    def to_text(self) -> str:
        """Compact serialization: rows of color digits joined by '/'."""
        return "/".join("".join(str(v) for v in row) for row in self.cells)

    @staticmethod
    def from_text(text: str) -> "Grid":
        rows = text.split("/")
        return Grid(tuple(tuple(int(ch) for ch in row) for row in rows))


class PaletteCodebook:
    """Fixed unit codewords, one per palette color.

    Built by QR-orthonormalizing a seeded Gaussian matrix, with row signs
    pinned so the result is deterministic. Orthonormality gives pairwise
    distance sqrt(2) between any two codewords.
    """

    def __init__(self, palette_size: int = vocab.PALETTE_SIZE, d_lat: int = D_LAT,
                 seed: int = _CODEBOOK_SEED):
        if palette_size > d_lat:
            raise ValueError("orthonormal codebook needs palette_size <= d_lat")
        rng = make_rng(seed)
        mat = rng.standard_normal((d_lat, d_lat))
        q, r = np.linalg.qr(mat)
        q = q * np.sign(np.diag(r))  # pin orientation
        self.vectors = np.ascontiguousarray(q[:palette_size], dtype=np.float64)
        self.palette_size = palette_size
        self.d_lat = d_lat
        dists = [
            float(np.linalg.norm(self.vectors[i] - self.vectors[j]))
            for i in range(palette_size)
            for j in range(i + 1, palette_size)
        ]
        self.min_distance = min(dists)

    def encode_gen(self, grid: Grid) -> np.ndarray:
        """Continuous latents, one codeword per cell, row-major: (H*W, d_lat)."""
        flat = grid.to_array().reshape(-1)
        return self.vectors[flat].copy()

    def decode_gen(self, latents: np.ndarray) -> Grid:
        """Nearest-codeword decode back to a Grid (ties break to lowest color)."""
        latents = np.asarray(latents, dtype=np.float64)
        if not np.all(np.isfinite(latents)):
            raise ValueError("non-finite latents")
        if latents.ndim != 2 or latents.shape[1] != self.d_lat:
            raise ValueError(f"expected (cells, {self.d_lat}) latents, got {latents.shape}")
        n = latents.shape[0]
        side = int(round(n ** 0.5))
        if side * side != n:
            raise ValueError(f"latent count {n} is not a square grid")
        # Unit-norm codewords: nearest in L2 == highest dot product.
        scores = latents @ self.vectors.T
        colors = np.argmax(scores, axis=1)
        return Grid.from_array(colors.reshape(side, side))

    def encode_und(self, grid: Grid) -> list[int]:
        """Discrete understanding tokens, row-major, one per cell."""
        return [vocab.pixel_id(int(v)) for v in grid.to_array().reshape(-1)]


_DEFAULT_CODEBOOK = None


def default_codebook() -> PaletteCodebook:
    global _DEFAULT_CODEBOOK
    if _DEFAULT_CODEBOOK is None:
        _DEFAULT_CODEBOOK = PaletteCodebook()
    return _DEFAULT_CODEBOOK
