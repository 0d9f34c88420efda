# Copyright 2026 The nkb-lab Authors
# SPDX-License-Identifier: Apache-2.0
"""Neural knowledge bank lab.

    import nkb_lab as nkb
    cfg = nkb.Config("configs/desk.conf", {"pretrain.max_steps": "200"})
    ds = nkb.generate_dataset(cfg)
    model = nkb.new_base_model(cfg, ds)
    nkb.pretrain(model, cfg, ds)
"""

from ._core import *  # noqa: F401,F403
from ._core import __version__  # noqa: F401
