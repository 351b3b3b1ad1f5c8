"""A short training run on synthetic hinged-cylinder keypoints.

Runs in about a minute on one core. It shows the losses falling, not a
converged model; the acceptance suite runs the long version.
"""
import numpy as np
import torch

from dp3d.data import PoseSampler, stack_keypoints, synth_dataset
from dp3d.evaluation import seg_agreement
from dp3d.losses import LossWeights
from dp3d.mesh import normalize_mesh, spectral_basis
from dp3d.model import DP3D, ModelConfig
from dp3d.optim import OptimizerConfig, ParamSet, train
from dp3d.shapes import hinged_cylinder

torch.set_num_threads(1)
rng = np.random.default_rng(0)

# %% Data: random hinge angles seen from random viewpoints
shape = hinged_cylinder()
mesh = normalize_mesh(shape.mesh)
lo, hi = shape.mesh.vertices.min(0), shape.mesh.vertices.max(0)
pivots = (shape.pivots - 0.5 * (lo + hi)) / shape.mesh.bbox_diagonal()
ds = synth_dataset(mesh, shape.labels, PoseSampler(pivots, shape.parents), 60, seed=0)
y, z = stack_keypoints(ds)
print(f"{len(ds)} instances, {z.sum(1).mean():.0f} visible keypoints on average")

# %% Model with 4 parts and small networks
basis = spectral_basis(mesh, 32)
model = DP3D(mesh, basis, ModelConfig(n_parts=4, n_u=32, width=128, hidden=32, n_blocks=1), rng)
Y, Z = torch.as_tensor(y), torch.as_tensor(z)
weights = LossWeights()


def step(idx, epoch, b):
    return model.loss(Y[idx], Z[idx], np.random.default_rng([epoch, b]), weights)


# %% Train
cfg = OptimizerConfig(learning_rate=0.003, momentum=0.9, epochs=30, batch_size=10)
history = train(ParamSet.from_module(model), len(ds), step, cfg)
for h in history[::5] + history[-1:]:
    print(f"epoch {h['epoch']:3d}  total {h['total']:.4f}  rep {h['rep']:.4f}")

# %% Segmentation against the true hinge split
P = model.segmentation().detach().numpy()
print(f"segmentation agreement: {seg_agreement(P, shape.labels):.3f}")
