import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from nutsearch.textdata import make_synthetic
from nutsearch.trainers import TrainConfig, train_arae, train_classifier, train_lm

# Training fixtures are session-scoped: every module that needs a trained
# model shares the same run, so the heavy training cost is paid once.

SENTIMENT_SEED = 11
NLI_SEED = 13

LSTM2_CFG = TrainConfig(epochs=20, lr=0.2, seed=3, augment_prefixes=0.05,
                        emb_noise=0.4)
BAG_CFG = TrainConfig(epochs=12, lr=0.05, seed=4)
PAIR_CFG = TrainConfig(epochs=16, lr=0.05, seed=5)
LM_CFG = TrainConfig(epochs=10, lr=0.2, seed=6)
ARAE_CFG = TrainConfig(epochs=80, lr=1.2, momentum=0.9, gan_lr=0.15,
                       lr_anneal=0.97, seed=7)
ARAE_DIMS = dict(latent_scale=3.0)


@pytest.fixture(scope="session")
def sentiment_data():
    return make_synthetic("sentiment", seed=SENTIMENT_SEED)


@pytest.fixture(scope="session")
def nli_data():
    return make_synthetic("nli", seed=NLI_SEED)


@pytest.fixture(scope="session")
def lstm2_sentiment(sentiment_data):
    split, vocab = sentiment_data
    return train_classifier(split, vocab, "lstm2", 2, LSTM2_CFG)


@pytest.fixture(scope="session")
def bag_sentiment(sentiment_data):
    split, vocab = sentiment_data
    return train_classifier(split, vocab, "bag", 2, BAG_CFG)


@pytest.fixture(scope="session")
def pair_nli(nli_data):
    split, vocab = nli_data
    return train_classifier(split, vocab, "pair", 3, PAIR_CFG)


@pytest.fixture(scope="session")
def lm_sentiment(sentiment_data):
    split, vocab = sentiment_data
    return train_lm(split, vocab, LM_CFG)


@pytest.fixture(scope="session")
def arae_sentiment(sentiment_data):
    split, vocab = sentiment_data
    return train_arae(split, vocab, ARAE_CFG, **ARAE_DIMS)
