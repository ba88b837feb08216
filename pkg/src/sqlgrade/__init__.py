"""Multi-task convolutional self-attention grader for SQL statements."""

from .data import Remark, SubmissionRecord, generate_synthetic, kfold_split, load_csv, loo_split, to_example, write_csv
from .model import GraderNet, ModelConfig, Prediction, build, load_checkpoint, save_checkpoint
from .tensor import SeededRng
from .tokenizer import Vocabulary, build_vocab, encode, lex
from .training import RMSprop, TrainConfig, cross_validate, train_iterative, train_joint

__version__ = "0.1.0"
