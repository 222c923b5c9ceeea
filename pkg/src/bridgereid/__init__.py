"""Cross-modal visible-infrared re-identification training with a
generated bridging modality used as train-time-only side information."""

from .config import ConfigError, TrainConfig, load_config, parse_config
from .data import (Batch, DataError, Dataset, EraseSchedule, ImageSample,
                   Modality, Split, load_dataset, preprocess, random_erase,
                   sample_batch, save_dataset, synthesize_toy_dataset)
from .discriminator import (Discriminator, DiscriminatorConfig, LabelGroup,
                            adversarial_label, expand_labels)
from .embedding import Branch, Embedder, EmbeddingConfig, l2_normalize
from .evaluation import (ProtocolError, RetrievalProtocol, ShotMode,
                         bridging_report, build_protocol, cmc,
                         evaluate_retrieval, mean_average_precision, mmd,
                         pairwise_distances)
from .generator import CrossLocalAttention, Generator, GeneratorConfig
from .losses import (BatchFeatures, LossWeights, adversarial_loss,
                     batch_centers, batch_hard_triplet_loss, color_free_loss,
                     cross_entropy_id, discriminator_loss, dual_triplet_loss,
                     embedding_total, generator_total, reconstruction_loss,
                     triplet_loss)
from .trainer import (CheckpointError, ModelState, NumericalError,
                      init_state, load_checkpoint, save_checkpoint, train,
                      train_step)

__version__ = "0.1.0"
