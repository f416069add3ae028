from .coco import (
    AnnotationFileMissing,
    BoxOutOfBoundsError,
    DatasetError,
    DatasetIndex,
    DuplicateImageError,
    ImageRecord,
    MalformedAnnotations,
    UnknownImageError,
    load_coco_subset,
    to_coco_dict,
    write_coco,
)
from .evaluate import EvalResult, GroundTruth, UnsortedDetectionsError, eval_map
from .imageio import ImageFormatError, read_image, write_image
from .synth import palette, synth_dataset
from .transforms import denormalize, normalize, resize_bilinear, resize_image
