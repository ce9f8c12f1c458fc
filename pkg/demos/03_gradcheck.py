"""Finite-difference check of every preset through backbone, pipeline, head and loss.

Also shows that a deliberately wrong backward pass is caught.
"""

from aaf import PRESETS, preset
from aaf.harness.verify import GRADCHECK_TOL, corrupted_adjoint, detector_gradcheck

for name in PRESETS:
    errors = detector_gradcheck(preset(name))
    worst = max(errors, key=errors.get)
    print(f"{name:11s} max relative error {errors[worst]:.2e} at {worst}")

with corrupted_adjoint("relu"):
    errors = detector_gradcheck(preset("frw"))
bad = sorted(n for n, e in errors.items() if e > GRADCHECK_TOL)
print("with a broken relu backward, failing parameters:", bad)
