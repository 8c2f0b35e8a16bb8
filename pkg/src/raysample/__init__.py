"""Uniform point sampling on implicit surfaces by casting random lines.

Rays with uniform line measure are traced through a scalar field with
all-intersections sphere tracing; every hit is a uniform surface sample, and
the hit and chord statistics give area, volume and centroid estimates.
"""

from raysample.errors import (
    DegenerateGradientError,
    EmptySurfaceError,
    FieldEvaluationError,
    GridLoadError,
    MeshLoadError,
    ProjectionError,
    RaySampleError,
    UnsignedFieldError,
)
from raysample.fields import (
    Absolute,
    BoundingBox,
    Box,
    CallableField,
    Complement,
    Constant,
    GridField,
    ImplicitField,
    Intersection,
    Offset,
    Plane,
    Signedness,
    Sphere,
    Torus,
    Transform,
    Union,
    WithLipschitz,
)
from raysample.mesh import MeshField, load_mesh
from raysample.rays import BoundingSphere, Ray, RayBatch, RayMode, RayStreamConfig, sample_ray, uniform_rays
from raysample.tracer import TraceBatch, TraceConfig, TraceResult, newton_project, trace_all, trace_rays
from raysample.sampler import (
    SampleMode,
    SampleSet,
    build_voxels,
    sample_keep_all,
    sample_keep_one,
    sample_resampled,
    sample_stratified,
)
from raysample.moments import EstimatorReport, estimate_moments

__version__ = "0.1.0"
