"""Training-free memorization mitigation for diffusion-style samplers.

The library builds the initial latent from a frequency blend of noise and a
reference, localizes when (timestep window) and where (binary spatial mask)
to intervene, and injects reference features into the clean prediction
during the reverse loop. A candidate-scoring stack (semantic alignment,
index novelty, perceptual-hash uniqueness) picks the reference. Everything
runs against an analytic desk-scale sampler; model-dependent pieces sit
behind pluggable providers.
"""

from .denoisers import (
    ConditioningSpec,
    GaussianMixture,
    GaussianMixtureDenoiser,
    MemorizationSpec,
    MemorizingDenoiser,
    load_gaussian_mixture,
    save_gaussian_mixture,
)
from .diffusion import NoiseSchedule, cfg_combine, ddim_step, forward_diffuse, make_schedule, predict_x0
from .frequency import FrequencyMaskPair, frequency_blend_init, make_frequency_masks
from .latent import (
    Latent,
    SoftMap,
    gaussian_smooth,
    load_latent,
    load_softmap,
    save_latent,
    save_softmap,
    standardize_channels,
)
from .masks import (
    AttentionStack,
    BinaryMask,
    aggregate_concept_attention,
    intersect_masks,
    load_attention_stack,
    make_patch_similarity_provider,
    patch_similarity_map,
    product_threshold,
)
from .metrics import ExperimentSetup, RunMetrics, ablation_sweep, align_analog, sscd_analog
from .phash import hamming64, load_phash_corpus, phash64, save_phash_corpus, uniqueness_score
from .pipeline import (
    GenerationResult,
    InjectionConfig,
    Providers,
    inject,
    run_mitigated,
    run_vanilla,
)
from .retrieval import (
    FeatureHashEmbedder,
    LocalDirectorySource,
    PexelsSource,
    UnsplashSource,
    fetch_candidates,
)
from .selector import (
    Candidate,
    CandidateScore,
    composite_select,
    extract_query_words,
    semantic_alignment,
)
from .toy import ToyWorld, make_toy_world, smooth_latent
from .vecindex import VectorIndex, build_index, load_index, novelty_score, save_index
from .window import (
    DEFAULT_WINDOW,
    InjectionWindow,
    SimilarityTrace,
    alignment_trace,
    find_window,
    map_window_to_ddim,
    trace_derivative,
    trace_from_csv,
    trace_to_csv,
)

__version__ = "0.1.0"
