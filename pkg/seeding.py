"""
seeding.py

Explicit seed handling. Every random draw in the toolkit comes from a
torch.Generator built here; no global RNG state is consumed, so results
depend only on the seeds handed in.
"""
import contextlib
import hashlib

import torch

SEED_MODULUS = 2 ** 63 - 1


def derive_seed(master_seed: int, *identifiers) -> int:
    """Stable child seed from a master seed and any cell identifiers.

    Adding new identifiers elsewhere never changes the seed of an existing cell.
    """
    text = '|'.join([str(int(master_seed))] + [repr(i) for i in identifiers])
    digest = hashlib.sha256(text.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little') % SEED_MODULUS


def make_generator(seed: int) -> torch.Generator:
    generator = torch.Generator(device='cpu')
    generator.manual_seed(int(seed) % SEED_MODULUS)
    return generator


def randn_like(x: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    return torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)


@contextlib.contextmanager
def seeded_init(seed: int):
    """Scope in which torch's global RNG is seeded for nn.Module initialisation.

    The surrounding global state is restored on exit.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed) % SEED_MODULUS)
        yield
