"""cldlab: exact playground for causal-latent domain generalization.

Discrete families with enumerable latents, an exact oracle for the
framework's theorems, a minimal reverse-mode tape for the trainable side,
and a harness that writes deterministic artifacts.
"""

from .cld_core import (
    CldFamily,
    Dataset,
    DomainSpec,
    LatentSpaces,
    bit_coords,
    build_family,
    canonical_fixture,
    check_family_coherence,
    family_from_dict,
    family_to_dict,
    joint_cnxy,
    load_family_json,
    make_domain,
    random_family,
    sample_dataset,
)
from .diffkit import (
    Model,
    Node,
    Tape,
    backward,
    finite_diff_check,
    forward,
    init_model,
    init_raw_model,
    load_checkpoint,
    save_checkpoint,
)
from .errors import (
    CldlabError,
    ConfigError,
    EmptyPureSet,
    InvalidDistribution,
    MixedVariants,
    NonFiniteActivation,
    NotStochastic,
    ShapeMismatch,
    TooFewDomains,
    TooFewExamples,
    UnknownFixture,
    UnlabeledPair,
)
from .oracle import (
    CLAIM_IDS,
    CausalFaithful,
    ClaimResult,
    FusedTable,
    InvarianceResult,
    PredictorTable,
    TheoremReport,
    bayes_predictor,
    exact_accuracy,
    exact_ci_index,
    exact_loss,
    fuse,
    is_causal_invariant,
    optimal_causal_faithful,
    predictor_table,
    random_predictor,
    support_condition,
    verify_theorems,
)
from .harness import (
    ExperimentConfig,
    ResultRecord,
    config_from_dict,
    config_hash,
    generate_artifacts,
    run_experiment,
    sweep,
    verify_suite,
)
from .metrics import (
    CiEstimate,
    EvalResult,
    FeatureDivergences,
    ci_index_mc,
    evaluate,
    evaluate_exact,
    feature_divergences,
    jsd_base2,
    model_features,
    tabulate,
)
from .objectives import DomainBatch, ObjectiveConfig
from .pairgen import ContrastivePair, read_pairs_jsonl, sample_pairs, write_pairs_jsonl
from .rng import derive_seed, substream

__version__ = "0.1.0"
