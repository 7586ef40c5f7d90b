"""comap: participatory map-sharing protocol engine and multi-agent simulator.

Devices describe new keyframes to the map server with a 64-byte metadata
query; the server samples the pose's view cone against the global map to
grade overlap, so devices upload only fresh map data, reuse shared map
slices on seen paths, and detect when the world has changed.
"""

from .expansion import (
    AlignmentEstimate,
    Keyframe,
    OptimizationReport,
    RigidTransform,
    build_response,
    estimate_alignment,
    inject_redundancy,
    integrate_upload,
    on_session_end,
    partition_keyframe,
)
from .geometry import (
    CameraIntrinsics,
    Pose,
    ViewCone,
    compute_fov,
    contains,
    contains_many,
    cone_from_fov,
    make_view_cone,
    optical_axis,
    pose_angle,
    pose_distance,
    sample_cone,
)
from .mapstore import (
    GlobalMap,
    MapFrame,
    MapPoint,
    NeighborSet,
    audit,
    insert_frame,
    load_snapshot,
    save_snapshot,
    select_neighbors,
)
from .overlap import OverlapVerdict, assess_overlap, freshness_ratio
from .params import CAMERA_PRESETS, DEFAULT_PARAMS, FULL_KEYFRAME_BYTES, ProtocolParams
from .runtime import (
    ClientConfig,
    InProcTransport,
    MapServer,
    TcpMapServer,
    TcpTransport,
    TokenBucket,
    client_pipeline,
    serve,
    throttle,
)
from .scenario import (
    Metrics,
    ScenarioConfig,
    config_from_dict,
    freshness_traffic_report,
    load_config,
    run_scenario,
    vanilla_twin,
)
from .sharing import (
    DeviceAction,
    DeviceLoopState,
    LocalizationOutcome,
    SharedMapSlice,
    UpdateStatus,
    UpdateVerdict,
    build_shared_map,
    count_map_requests,
    get_update_status,
    localize,
    run_device_loop,
)
from .sim import (
    Scene,
    TrajectorySpec,
    generate_keyframes,
    generate_scene,
    mutate_scene,
    observe,
)
from .spatial import KdTree, build_point_kdtree
from .wire import (
    DecodeError,
    KeyframeUploadMsg,
    OverlapQueryMsg,
    OverlapResponseMsg,
    SessionEndMsg,
    SessionRegisterMsg,
    SharedMapRequestMsg,
    SharedMapResponseMsg,
    TrafficStats,
    UpdateCheckMsg,
    UpdateStatusMsg,
    decode,
    encode,
    meter,
)

__version__ = "0.1.0"
