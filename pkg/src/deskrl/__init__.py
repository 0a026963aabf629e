"""Desk-scale pretrain/finetune RL with a physics-informed world model.

Modules:
    diffcore    reverse-mode AD over float64 arrays
    rbd         planar rigid-body dynamics, PD torques, semi-implicit Euler
    nets        MLPs, Gaussian actor, residual predictor, running normalizers
    optim       Adam-style per-parameter adaptive gradient descent
    checkpoint  binary named-tensor container
    sac         soft actor-critic agent, replay buffers, update loop
    translog    append-only binary transition log
    piwm        physics-informed world model and its training loop
    ensemble    pure-NN ensemble dynamics model (comparison baseline)
    envs        ground-truth desk environments, rewards, termination, logging
    pipeline    stage orchestration: pretrain, wm-pretrain, finetune, eval, ablate
    cli         command-line entry point
"""

__version__ = "0.1.0"
