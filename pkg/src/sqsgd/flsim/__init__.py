from .data import Dataset, Shard, partition, synth_data
from .idx import IdxError, IdxMagicError, IdxTruncatedError, LabelRangeError, load_idx
from .models import MLP, LogisticRegression, accuracy, build_model
from .simulator import (
    ClientState,
    Pipeline,
    RoundMessage,
    TrainResult,
    aggregate,
    build_pipeline,
    client_round,
    rounds_per_epoch,
    server_round,
    train,
)
