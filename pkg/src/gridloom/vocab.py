"""Closed DSL vocabulary.

Flat symbol inventory: structural markers, edit verbs, color words, cell
coordinate tokens (one token per cell of the 8x8 grid), octal digits,
verdicts, and one discrete pixel token per palette color for the
understanding encoding of images. Token ids are stable: they are assigned
in the order the lists below are written, so serialized data never goes
stale against code that didn't reorder them.
"""

from .errors import DecodeError

GRID_SIZE = 8
PALETTE_SIZE = 8

COLOR_NAMES = ["BLACK", "RED", "GREEN", "BLUE", "YELLOW", "PURPLE", "CYAN", "WHITE"]

# Structural markers (STRUCT role).
PAD = "<PAD>"
SYS = "<SYS>"
USER = "<USER>"
PLAN = "<PLAN>"
INSTR = "<INSTR>"
STATE = "<STATE>"
ACT = "<ACT>"
REW = "<REW>"
OUT = "<OUT>"
ANS = "<ANS>"
IMG = "<IMG>"
IMG_END = "</IMG>"
SEP = "<SEP>"
END = "<END>"

STRUCT_TOKENS = [PAD, SYS, USER, PLAN, INSTR, STATE, ACT, REW, OUT, ANS, IMG, IMG_END, SEP, END]

VERBS = ["RECOLOR", "MOVE", "FILL_ROW", "FILL_COL", "BORDER", "SWAP"]
DIGITS = [f"D{i}" for i in range(GRID_SIZE)]
CELLS = [f"AT_{r}_{c}" for r in range(GRID_SIZE) for c in range(GRID_SIZE)]
WORDS = ["THEN", "PASS", "FAIL", "CELL", "SHOULD_BE", "COUNT", "DONE", "GRID", "AGENT"]
PIXELS = [f"PIX_{name}" for name in COLOR_NAMES]

_ALL = STRUCT_TOKENS + VERBS + COLOR_NAMES + DIGITS + CELLS + WORDS + PIXELS

TOKEN_TO_ID = {tok: i for i, tok in enumerate(_ALL)}
ID_TO_TOKEN = list(_ALL)
VOCAB_SIZE = len(_ALL)

PAD_ID = TOKEN_TO_ID[PAD]
END_ID = TOKEN_TO_ID[END]
SEP_ID = TOKEN_TO_ID[SEP]
IMG_ID = TOKEN_TO_ID[IMG]
IMG_END_ID = TOKEN_TO_ID[IMG_END]
PASS_ID = TOKEN_TO_ID["PASS"]
FAIL_ID = TOKEN_TO_ID["FAIL"]

_STRUCT_IDS = frozenset(TOKEN_TO_ID[t] for t in STRUCT_TOKENS)
_PIXEL_IDS = frozenset(TOKEN_TO_ID[t] for t in PIXELS)
PIXEL_ID_BASE = TOKEN_TO_ID[PIXELS[0]]


def is_struct_id(token_id: int) -> bool:
    return token_id in _STRUCT_IDS


def is_pixel_id(token_id: int) -> bool:
    return token_id in _PIXEL_IDS


def pixel_id(color: int) -> int:
    """Discrete understanding token for a palette color."""
    if not 0 <= color < PALETTE_SIZE:
        raise ValueError(f"color {color} out of palette range")
    return PIXEL_ID_BASE + color


def cell_token(row: int, col: int) -> str:
    if not (0 <= row < GRID_SIZE and 0 <= col < GRID_SIZE):
        raise ValueError(f"cell ({row},{col}) off-grid")
    return f"AT_{row}_{col}"


def parse_cell_token(token: str) -> tuple[int, int]:
    parts = token.split("_")
    if len(parts) != 3 or parts[0] != "AT":
        raise DecodeError(f"not a cell token: {token!r}")
    return int(parts[1]), int(parts[2])


def encode(text: str) -> list[int]:
    """Whitespace-split a DSL string into token ids."""
    ids = []
    for word in text.split():
        if word not in TOKEN_TO_ID:
            raise DecodeError(f"unknown DSL symbol: {word!r}")
        ids.append(TOKEN_TO_ID[word])
    return ids


def decode(ids) -> str:
    return " ".join(ID_TO_TOKEN[int(i)] for i in ids)
