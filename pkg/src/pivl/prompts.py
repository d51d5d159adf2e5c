"""Prompt assembly: learnable per-identity context tokens, a frozen word
vocabulary, and per-cell text-embedding targets for dense alignment."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .synthgen import IGNORE_ID

TEMPLATE_WORDS = ("a", "photo", "of", "person")


@dataclass
class AlignmentTarget:
    """Per-cell text embeddings at fusion resolution.

    Every non-ignored cell equals the embedding of exactly one
    (identity, part) prompt; erased cells are masked out.
    """

    cells: torch.Tensor   # (Hg, Wg, d)
    ignore: torch.Tensor  # (Hg, Wg) bool


class PromptContextStore(nn.Module):
    """Per-identity learnable context matrices plus the frozen vocabulary."""

    def __init__(self, identities: list[int], part_names: list[str],
                 context_tokens: int = 4, token_width: int = 32):
        super().__init__()
        self.identities = list(identities)
        self.part_names = list(part_names)
        self.context_tokens = context_tokens
        self.token_width = token_width
        self._row = {ident: i for i, ident in enumerate(self.identities)}

        words = list(dict.fromkeys(TEMPLATE_WORDS + tuple(part_names)))
        self.word_index = {w: i for i, w in enumerate(words)}
        vocab = torch.randn(len(words), token_width) * 0.5
        self.register_buffer("vocab", vocab)  # frozen word embeddings

        self.context = nn.Parameter(
            torch.randn(len(self.identities), context_tokens, token_width) * 0.02)

    # -- token sequences ----------------------------------------------------

    def _word(self, w: str) -> torch.Tensor:
        if w not in self.word_index:
            raise KeyError(f"word {w!r} not in the prompt vocabulary")
        return self.vocab[self.word_index[w]]

    def _template(self) -> list[torch.Tensor]:
        return [self._word("a"), self._word("photo"), self._word("of"), self._word("a")]

    def assemble_identity_prompt(self, identity: int) -> torch.Tensor:
        """[a, photo, of, a, X_1..X_M, person] -> (5+M, token_width)."""
        if identity not in self._row:
            raise KeyError(f"identity {identity} has no context matrix")
        ctx = self.context[self._row[identity]]
        parts = self._template() + [ctx[m] for m in range(self.context_tokens)] \
            + [self._word("person")]
        return torch.stack(parts)

    def assemble_part_prompt(self, identity: int, part_name: str) -> torch.Tensor:
        """Identity prompt with the part word appended (pure concatenation)."""
        seq = self.assemble_identity_prompt(identity)
        return torch.cat([seq, self._word(part_name).unsqueeze(0)])

    def generic_part_prompt(self, part_name: str) -> torch.Tensor:
        """Parsing-label-only prompt: generic template + part word, no context."""
        parts = self._template() + [self._word(part_name)]
        return torch.stack(parts)

    # -- embedding helpers ---------------------------------------------------

    def identity_text_matrix(self, text_encoder, identities=None) -> torch.Tensor:
        """(n, d) stack of identity-prompt embeddings (rows follow `identities`)."""
        idents = self.identities if identities is None else identities
        seqs = torch.stack([self.assemble_identity_prompt(i) for i in idents])
        return text_encoder(seqs)

    def part_text_table(self, text_encoder, mode: str = "identity") -> torch.Tensor:
        """All (identity, part) prompt embeddings, one text_forward batch per part.

        mode 'identity': identity-aware part prompts, shape (n_ids, n_parts, d).
        mode 'generic':  parsing-label-only prompts, shape (1, n_parts, d) —
        rows are shared by every identity.
        """
        if mode == "generic":
            seqs = torch.stack([self.generic_part_prompt(p) for p in self.part_names])
            return text_encoder(seqs).unsqueeze(0)
        if mode != "identity":
            raise ValueError(f"unknown prompt mode {mode!r}")
        rows = []
        for part in self.part_names:
            seqs = torch.stack([self.assemble_part_prompt(i, part) for i in self.identities])
            rows.append(text_encoder(seqs))
        return torch.stack(rows, dim=1)  # (n_ids, n_parts, d)

    def row_of(self, identity: int) -> int:
        return self._row[identity]

    def vocab_hash(self) -> str:
        h = hashlib.sha256()
        for w in sorted(self.word_index):
            h.update(w.encode())
        h.update(self.vocab.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def build_alignment_target(store: PromptContextStore, text_encoder,
                           parsing_ds: np.ndarray, identity: int,
                           mode: str = "identity") -> AlignmentTarget:
    """Gather per-cell prompt embeddings for one image's downsampled parsing.

    Calls the text encoder once per distinct part present (caching contract);
    IGNORE cells are masked out.
    """
    hg, wg = parsing_ds.shape
    ignore = torch.from_numpy(parsing_ds == IGNORE_ID)
    present = [int(p) for p in np.unique(parsing_ds) if p != IGNORE_ID]
    embeds = {}
    for pid in present:
        name = store.part_names[pid]
        seq = (store.assemble_part_prompt(identity, name) if mode == "identity"
               else store.generic_part_prompt(name))
        embeds[pid] = text_encoder(seq)
    d = next(iter(embeds.values())).shape[-1] if embeds else store.token_width
    cells = torch.zeros(hg, wg, d)
    for pid in present:
        mask = torch.from_numpy(parsing_ds == pid)
        cells[mask] = embeds[pid].to(cells.dtype)
    return AlignmentTarget(cells, ignore)


# ---------------------------------------------------------------------------
# prompt checkpoints: JSON metadata + npz matrix blob, separate from encoder
# checkpoints so prompts can seed the student-transfer run
# ---------------------------------------------------------------------------

def save_prompts(store: PromptContextStore, path: str):
    meta = {
        "context_tokens": store.context_tokens,
        "token_width": store.token_width,
        "identities": store.identities,
        "part_names": store.part_names,
        "vocab_hash": store.vocab_hash(),
    }
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    np.savez(path + ".npz",
             context=store.context.detach().cpu().numpy(),
             vocab=store.vocab.cpu().numpy())


def load_prompts(path: str) -> PromptContextStore:
    with open(path + ".json") as fh:
        meta = json.load(fh)
    blobs = np.load(path + ".npz")
    store = PromptContextStore(meta["identities"], meta["part_names"],
                               meta["context_tokens"], meta["token_width"])
    with torch.no_grad():
        store.context.copy_(torch.from_numpy(blobs["context"]))
        store.vocab.copy_(torch.from_numpy(blobs["vocab"]))
    if store.vocab_hash() != meta["vocab_hash"]:
        raise ValueError(f"vocab hash mismatch loading {path}")
    return store
