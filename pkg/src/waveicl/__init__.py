"""waveicl: EEG trials -> stacked waveform images -> retrieval-augmented
few-shot VLM classification, evaluated leave-one-subject-out."""

from .dataset import (DatasetError, DatasetManifest, EegTrial, EveryNthAll, EveryNthOfClass,
                      SubjectPool, SynthSpec, downsample_trials, historical_pool,
                      load_manifest, save_dataset, synthesize_dataset, window_recording)
from .embeddings import (Centroid, Embedding, EmbeddingError, EmbeddingStore, FileProvider,
                         HttpProvider, MissingEmbeddingError, PixelStatsProvider,
                         ProviderContractError, StoreLookup, centroid, cosine_distance,
                         embed_image, medoid, representativeness)
from .evaluation import (EvalConfig, EvalReport, EvaluationError, ParseFailurePolicy,
                         ProviderConfig, bca, run_ablation, run_loso)
from .gateway import (AuthenticationError, BackendConfig, BackendKind, GatewayError,
                      ResponseCache, VlmGateway, VlmResponse, classify)
from .prompts import (ParseFailure, PromptBundle, PromptConfig, PromptError, Tier,
                      build_prompt, parse_decision)
from .render import (Normalizer, PaletteMode, RenderConfig, RenderError, WaveformImage,
                     channel_palette, layout_trial, normalize_channel, rasterize)
from .selection import (EmptyHistoricalPool, InsufficientPool, SelectionConfig,
                        SelectionError, Strategy, SupportEntry, SupportSet,
                        auxiliary_medoids, build_support_set, select_nontask_anchors,
                        select_task_examples)

__version__ = "0.1.0"
