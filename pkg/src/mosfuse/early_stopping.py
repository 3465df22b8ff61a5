from __future__ import annotations

import math


class EarlyStopping:
    """Patience counter on a loss that should decrease.

    An epoch counts as an improvement only if its loss is strictly below the
    best seen so far. ``step`` returns True once ``patience`` consecutive
    epochs failed to improve.
    """

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.wait = 0
        self.improved = False

    def step(self, loss: float) -> bool:
        self.epoch += 1
        self.improved = loss < self.best
        if self.improved:
            self.best = loss
            self.best_epoch = self.epoch
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience
