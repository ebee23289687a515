"""Learn a capacitance-to-wrench map for a synthetic fingertip sensor.

A forward model turns known wrenches into 8 capacitance channels.  A small
MLP learns the inverse.  With noisy readings the per-axis error should stay
near the noise floor; the hardware figures are printed for scale only.

    python demos/calibrate_sensor.py [epochs]
"""

import sys

from compliantkit.calibration import (TrainingConfig, evaluate,
                                      generate_synthetic_dataset, train_calibration)

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 60
data = generate_synthetic_dataset(seed=1, n=20_000, noise_sd=0.1)
print(f"{len(data.wrench)} samples, {data.capacitance.shape[1]} channels")


def progress(epoch, train, val):
    if epoch % 10 == 0:
        print(f"epoch {epoch:4d}  train {train:.4f}  val {val:.4f}")


result = train_calibration(data, TrainingConfig(epochs=epochs), progress)
print(f"best epoch {result.best_epoch}")
print(evaluate(result.model, data).format())
