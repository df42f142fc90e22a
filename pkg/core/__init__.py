# Core module initialization: tape autodiff, layers, optimizers, errors
