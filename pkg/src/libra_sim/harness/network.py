"""Point-to-point links with fixed delay and iid loss on top of the event loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..core import EventLoop, derive_rng
from ..wire import GradientPacket, encode


@dataclass
class LinkModel:
    delay: int = 5
    loss: float = 0.0
    seed: int = 0
    rng: np.random.Generator | None = field(default=None, repr=False)
    sent: int = 0
    lost: int = 0

    def __post_init__(self):
        if self.delay < 0:
            raise ValueError("link delay must be >= 0")
        if not 0 <= self.loss < 1:
            raise ValueError("loss probability must be in [0, 1)")

    def drops(self) -> bool:
        """Loss decision for the next packet on this link (one draw per packet ordinal)."""
        self.sent += 1
        if self.loss == 0:
            return False
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)
        if self.rng.random() < self.loss:
            self.lost += 1
            return True
        return False


Handler = Callable[[bytes, str], None]


class Network:
    """Routes encoded packets between named nodes; ``aliases`` map a logical name to a node."""

    def __init__(self, loop: EventLoop, delay: int = 5, loss: float = 0.0, seed: int = 0):
        self.loop = loop
        self.delay = delay
        self.loss = loss
        self.seed = seed
        self.nodes: dict[str, Handler] = {}
        self.aliases: dict[str, str] = {}
        self.links: dict[tuple[str, str], LinkModel] = {}
        self.bytes_sent = 0

    def attach(self, name: str, handler: Handler) -> None:
        self.nodes[name] = handler

    def resolve(self, name: str) -> str:
        return self.aliases.get(name, name)

    def link(self, src: str, dst: str) -> LinkModel:
        key = (src, dst)
        lk = self.links.get(key)
        if lk is None:
            rng = derive_rng(self.seed, f"link:{src}->{dst}")
            lk = self.links[key] = LinkModel(self.delay, self.loss, rng=rng)
        return lk

    def send(self, src: str, dst: str, pkt: GradientPacket) -> bool:
        """Encode and schedule delivery; returns False when the link drops the packet."""
        dst = self.resolve(dst)
        if dst not in self.nodes:
            raise KeyError(f"no node named {dst!r}")
        data = encode(pkt)
        self.bytes_sent += len(data)
        lk = self.link(src, dst)
        if lk.drops():
            return False
        self.loop.after(lk.delay, self.nodes[dst], data, src)
        return True

    @property
    def lost(self) -> int:
        return sum(lk.lost for lk in self.links.values())

    @property
    def sent(self) -> int:
        return sum(lk.sent for lk in self.links.values())
