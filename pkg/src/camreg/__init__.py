"""camreg: registration of a ceiling camera network from a mobile robot's
upward fisheye odometry and bidirectional detections, with a synthetic
scenario simulator and evaluation suite.
"""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    Pose,
    Tangent6,
    TimedPose,
    Trajectory,
    UnitQuaternion,
    compose,
    interpolate_pose,
    inverse,
    ominus,
    slerp,
)
from .fisheye import FisheyeIntrinsics, project_fisheye  # noqa: F401
from .optimizer import (  # noqa: F401
    LeastSquaresProblem,
    RobustLoss,
    SolveReport,
    SolverOptions,
    solve,
)
from .registration import (  # noqa: F401
    ArucoDetection,
    BlobDetection,
    CalibrationResult,
    CameraEstimate,
    PipelineOptions,
    run_pipeline,
)
from .simulator import Dataset, NoiseConfig, ScenarioConfig, generate_scenario  # noqa: F401
from .evaluation import compare_to_ground_truth, pose_rmsd, reprojection_rmse  # noqa: F401
