from .lora import LoRAAdapter, LoRAConv2d, LoRALinear, lora_forward
from .model import Model, build_demo_cnn, cross_entropy, reinit_head
from .optim import Adam, constant_schedule, cosine_schedule
from .schemes import (AtomsOnly, AtomsPlusLinear, DecomposeOptions, FullFinetune, LinearProbe,
                      LoRABaseline, OvercompletePlusLinear, Partition, SchemeError, TuningScheme,
                      Variant, decompose_model, freeze_partition, prepare_model)
from .train import EpochRecord, History, TrainConfig, TrainingError, evaluate, train
