# Training, sweeps, evaluation, curves and timing
