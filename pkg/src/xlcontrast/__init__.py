"""Cross-lingual pre-training with masked LM, translation LM and momentum contrast, in numpy."""

from .config import ConfigError, RunConfig
from .corpus import (MonoCorpus, ParallelCorpus, SyntheticData, Vocab, gen_synthetic_languages, load_corpora,
                     make_mmlm_instance, make_tlm_instance, make_xlco_instance, sample_language,
                     sampling_probabilities)
from .encoder import EncoderConfig, EncoderParams, encode, layer_mean_repr, sequence_repr
from .evaluation import estimate_mi, layer_sweep, retrieve, transfer_gap
from .gradcheck import finite_difference_check, joint_loss_check
from .momentum import EncoderPair, NegativeQueue, momentum_schedule
from .objectives import infonce_mi_estimate, joint_loss, mmlm_loss, xlco_loss
from .trainer import Corpora, TrainingError, train

__version__ = "0.1.0"
