"""
Build a familiarity model from the run configuration and its data source
"""
import logging
from dataclasses import replace

from models.baselines import LstmFamiliarityModel, MemNetFamiliarityModel
from models.base import FamiliarityModel
from models.nbf import NeuralBloomFilter
from tasks.sources import DatasetSource

logger = logging.getLogger(__name__)


def _fit_encoder(encoder_config, source: DatasetSource):
    if source.is_dense:
        if encoder_config.kind != 'mlp':
            raise ValueError(f"{source.kind} items are dense vectors; encoder.kind must be 'mlp'")
        if encoder_config.input_dim not in (0, source.dim):
            raise ValueError(f"encoder.input_dim {encoder_config.input_dim} != data dim {source.dim}")
        return replace(encoder_config, input_dim=source.dim)
    if encoder_config.kind == 'mlp':
        return replace(encoder_config, kind='trigram')
    return encoder_config


def build_model(kind: str, config, source: DatasetSource) -> FamiliarityModel:
    """``config`` is a RunConfig; ``kind`` picks which model section to use"""
    if kind == 'nbf':
        section = config.nbf
        model = NeuralBloomFilter(replace(section, encoder=_fit_encoder(section.encoder, source)))
    elif kind == 'lstm':
        section = config.lstm
        model = LstmFamiliarityModel(replace(section, encoder=_fit_encoder(section.encoder, source)))
    elif kind == 'memnet':
        section = config.memnet
        model = MemNetFamiliarityModel(replace(section, encoder=_fit_encoder(section.encoder, source)))
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    logger.debug(f"Built model {model.describe()}")
    return model
