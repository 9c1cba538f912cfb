# Two moons: how uncertain are DE and FoRDE far away from the data?
import numpy as np

from forde import data, experiments, metrics, nn, parvi

ds = data.gen_classification_2d(50, seed=0, noise=0.1)
cfg = nn.MLPConfig(2, (32, 32), 2)

# a ring three times wider than the data
radius = 3 * np.linalg.norm(ds.X, axis=1).max()
far = experiments.ring(radius, 64)

for method in ("de", "forde"):
    tcfg = parvi.TrainConfig(method=method, n_particles=16, epochs=100, batch_size=20, lr_init=0.05, lr_final=5e-4, seed=0)
    ens, log = parvi.train(ds.X, ds.y, cfg, tcfg)
    ent = metrics.entropy_map(ens, far)
    print(f"{method:6s} train acc {log[-1]['train_acc']:.3f}  far-field entropy {ent.mean():.3f}  (max {np.log(2):.3f})")

# entropy on a grid, ready for any plotting tool
xs = np.linspace(-3, 3, 41)
grid = np.array([(x, y) for y in xs for x in xs])
H = metrics.entropy_map(ens, grid).reshape(41, 41)
H.shape
