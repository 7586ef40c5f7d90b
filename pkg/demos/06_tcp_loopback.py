"""The same session over TCP and in-process transports, byte for byte.

Starts a TCP map server on the loopback interface, drives one client
against it, then replays the identical scenario in-process and compares
the device decision traces.
"""

import json

from comap import (
    CAMERA_PRESETS,
    ClientConfig,
    GlobalMap,
    InProcTransport,
    MapServer,
    ProtocolParams,
    TcpMapServer,
    TcpTransport,
    client_pipeline,
)
from comap.sim import TrajectorySpec, generate_keyframes, generate_scene

intr = CAMERA_PRESETS["sim_752x480"]
params = ProtocolParams()
scene = generate_scene(9, [[-25, -25, -18], [55, 25, 22]], 9000)
traj = TrajectorySpec(waypoints=[(0.0, 0.0, 1.5, 0.0), (24.0, 0.0, 1.5, 0.0)], d_kf=2.0)


def run(transport_factory):
    server = MapServer(GlobalMap(np_max=params.np_max), params=params, seed=5)
    transport, cleanup = transport_factory(server)
    stream = generate_keyframes(traj, scene, intr, np_max=params.np_max,
                                noise_sigma=0.05, seed=5 * 7919 + 1, params=params)
    result = client_pipeline(
        ClientConfig(client_id=1, intrinsics=intr, params=params), stream, transport
    )
    cleanup()
    return result


def tcp_factory(server):
    front = TcpMapServer(server).start()
    transport = TcpTransport(front.addr)
    print(f"serving on {front.addr[0]}:{front.addr[1]}")
    return transport, lambda: (transport.close(), front.stop())


def inproc_factory(server):
    return InProcTransport(server), lambda: None


tcp_result = run(tcp_factory)
inproc_result = run(inproc_factory)

same = json.dumps(tcp_result.trace) == json.dumps(inproc_result.trace)
print(f"keyframes: {tcp_result.keyframes}, uploads: {tcp_result.uploads}")
print(f"tcp bytes up/down: {tcp_result.stats.total_upload}/{tcp_result.stats.total_download}")
print(f"decision traces identical across transports: {same}")
assert same
