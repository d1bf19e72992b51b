from enum import Enum


class Precision(str, Enum):
    FLOAT32 = "float32"  # training runs
    FLOAT64 = "float64"  # verification runs


class NormMode(str, Enum):
    TRAIN = "train"
    INFER = "infer"


class Activation(str, Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"


class CapDirection(str, Enum):
    BELOW = "below"  # P(metric <= threshold), used for RMSE
    ABOVE = "above"  # P(metric > threshold), used for R


class Units(str, Enum):
    UG_M3 = "ug/m3"
    DIMENSIONLESS = "1"
    KELVIN = "K"
    M_S = "m/s"
    FRACTION = "fraction"
    M2_S2 = "m2/s2"
    EMISSION_RATE = "ug/m3/h"


class Preset(str, Enum):
    DESK = "desk"
    PAPER_SHAPE = "paper-shape"


class RunStatus(str, Enum):
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"
