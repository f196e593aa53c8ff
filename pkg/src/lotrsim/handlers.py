"""Built-in privcall routines that scenarios can REGISTER by name.

Each routine takes a :class:`~lotrsim.lotr.PrivUserContext` plus integer
arguments and returns the value left in RAX.  Routines run at the PrivUser
ring, so every memory access they make goes through the normal checks.
"""
from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass
from typing import Callable

from .lotr import ENOENT_VALUE, PrivUserContext

PASSWORD_SLOT = 32  # fixed buffer; comparisons always cover all of it


@dataclass(frozen=True)
class Builtin:
    name: str
    arity: int
    fn: Callable[..., int]


def echo(ctx: PrivUserContext, a0, a1, a2, a3, a4, a5) -> int:
    return a0


def add(ctx: PrivUserContext, a, b) -> int:
    return a + b


def _read_arg(ctx: PrivUserContext, addr: int, length: int) -> bytes:
    return ctx.read(addr, length) if length else b""


def load_password(ctx: PrivUserContext, addr, length) -> int:
    """Copy a password from the argument page into a heap slot named ``secret``."""
    if length > PASSWORD_SLOT:
        return ENOENT_VALUE
    data = _read_arg(ctx, addr, length)
    if "secret" in ctx.handle.symbols:
        slot, _ = ctx.handle.symbols["secret"]
    else:
        slot = ctx.alloc(PASSWORD_SLOT)
    ctx.write(slot, data.ljust(PASSWORD_SLOT, b"\0"))
    ctx.handle.symbols["secret"] = (slot, length)
    return 0


def check_password(ctx: PrivUserContext, addr, length) -> int:
    """1 if the argument matches the stored secret, else 0; constant-time over the slot."""
    if "secret" not in ctx.handle.symbols or length > PASSWORD_SLOT:
        return 0
    slot, stored_len = ctx.symbol("secret")
    stored = ctx.read(slot, stored_len).ljust(PASSWORD_SLOT, b"\0")
    given = _read_arg(ctx, addr, length).ljust(PASSWORD_SLOT, b"\0")
    same = hmac.compare_digest(stored, given)
    return int(same & (length == stored_len))


def sign(ctx: PrivUserContext, addr, length) -> int:
    """Keyed digest of the message at ``addr``, written back over the argument page start."""
    if "secret" not in ctx.handle.symbols:
        return ENOENT_VALUE
    slot, key_len = ctx.symbol("secret")
    digest = hmac.new(ctx.read(slot, key_len), _read_arg(ctx, addr, length), hashlib.sha256).digest()
    ctx.write(ctx.handle.config.arg_page[0], digest)
    return len(digest)


def use_pkey(ctx: PrivUserContext, addr, length) -> int:
    """Operation with the private key on a caller message; the key never leaves PrivUser memory."""
    return sign(ctx, addr, length)


def read_arg(ctx: PrivUserContext, addr) -> int:
    return ctx.read_u64(addr)


def reenter(ctx: PrivUserContext, nr) -> int:
    # PrivUser code trying to use the privcall path itself
    return ctx.privcall(nr)


BUILTINS: dict[str, Builtin] = {
    b.name: b for b in (
        Builtin("echo", 6, echo),
        Builtin("add", 2, add),
        Builtin("load_password", 2, load_password),
        Builtin("check_password", 2, check_password),
        Builtin("sign", 2, sign),
        Builtin("use_pkey", 2, use_pkey),
        Builtin("read_arg", 1, read_arg),
        Builtin("reenter", 1, reenter),
    )
}
