"""Report-guided pseudo-label refinement for 3D lesion detection.

Teacher-model probability maps are discretized into lesion candidates,
matched against lesion locations extracted from radiology report text via an
approximate prostate sector map, and corrected into pseudo labels; detection
quality is evaluated with DSC and fROC. A deterministic synthetic-cohort
generator supports end-to-end experiments without clinical data.
"""

from .label_correction import (
    EXCLUDED,
    CorrectionMethod,
    CorrectionResult,
    correct_by_count,
    correct_by_location,
    make_pseudo_label,
    no_correction,
)
from .lesion_ops import (
    LesionComponent,
    binarize,
    component_iou,
    ensemble_mean,
    mask_components,
    threshold_components,
)
from .metrics import (
    ANY_OVERLAP,
    DetectionTally,
    FrocCurve,
    MatchCriterion,
    detection_sweep,
    dsc,
    froc,
    iou_above,
    match_detections,
    pseudo_label_quality,
    threshold_at_sensitivity,
)
from .report_parser import (
    AP,
    SI,
    Laterality,
    LocationDescriptor,
    ParsedReport,
    ReportLesion,
    Zone,
    parse_report,
    report_to_json,
    significant_lesions,
)
from .sector_map import (
    BBox,
    SectorGrid,
    VoxelRegion,
    build_sector_grid,
    locate_component,
    prostate_bbox,
    region_for,
)
from .synthgen import SynthParams, SyntheticCase, gen_case, gen_cohort, write_cohort
from .volume import (
    Interp,
    NiftiFormatError,
    OrientationError,
    Volume3D,
    VolumeKind,
    load_volume,
    resample,
    save_volume,
    zscore_normalize,
)

__version__ = "0.1.0"
