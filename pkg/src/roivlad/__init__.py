"""Compact-descriptor image retrieval over Voronoi-partitioned cell encodings."""

from .features import (
    FeatureSet,
    GroundTruth,
    Keypoint,
    RoiQuery,
    SyntheticDatasetSpec,
    crop_features,
    load_dataset,
    load_features,
    load_ground_truth,
    load_manifest,
    load_queries,
    save_features,
    save_ground_truth,
    save_manifest,
    save_queries,
    synth_generate,
)
from .clustering import (
    GridPartition,
    PartitionTree,
    TreeShape,
    Vocabulary,
    assign,
    full_node_count,
    grid_block_count,
    grid_partition,
    kmeans,
    load_vocabulary,
    save_vocabulary,
    spatial_hkmeans,
)
from .encoder import (
    PcaModel,
    load_pca,
    pca_train,
    project,
    project_linear,
    save_pca,
    ssr_normalize,
    vlad_encode,
    whiten_normalize,
)
from .voronoi import (
    LeafStore,
    MultiIndex,
    QuantizedVoronoiIndex,
    SignVoronoiIndex,
    StorageReport,
    VoronoiIndex,
    leaf_projections,
    level_project,
    load_index,
    multi_encode,
    save_index,
    storage_report,
    ve_encode,
    whiten_index,
)
from .pq import (
    BlockVarianceReport,
    PQModel,
    SignCode,
    hamming_similarity,
    load_pq,
    pq_train,
    quantize,
    reconstruct,
    save_pq,
    sdc_similarity,
    sign_binarize,
    sign_codes_to_pq,
    sign_pq_model,
    subspace_variance_report,
    wnpq_encode,
)
from .search import (
    QueryDescriptor,
    RankedResult,
    SearchResult,
    combine_level_scores,
    fast_ve_search,
    global_max_score,
    quantized_fast_ve_search,
    quantized_level_projection_score,
    rank_dataset,
    rank_entries,
    subquery_search,
    tree_descent,
    whole_image_score,
)
from .evaluation import (
    BenchRow,
    ComplexityReport,
    QueryRecord,
    average_precision,
    bench_m_sweep,
    complexity_accounting,
    mean_average_precision,
    write_bench_csv,
)

__version__ = "0.1.0"
