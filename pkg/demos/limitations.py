"""Two failure modes of the host- and subsystem-based methods.

A host whose private partition is full cannot borrow free space from its
neighbour, and a subsystem-level volume cannot outgrow one subsystem.
"""
from sanvirt import build
from sanvirt.config import from_dict
from sanvirt.driver import IoRequest
from sanvirt.errors import InvalidConfig


def config(arch, hosts, subs, cap):
    return from_dict({"architecture": arch, "hosts": hosts, "block_size": 512,
                      "extent_size_blocks": 16,
                      "subsystems": [{"capacity_blocks": cap}] * subs})


def write(w, handle, start, n):
    out = []
    w.drivers["h0"].submit_io(handle, IoRequest(handle.volume_id, "W", start, n,
                                                bytes(n * 512)), out.append)
    w.sim.run_until_idle()
    return out[0].status


w = build(config("server_level", 2, 2, 1024))
vid = w.create_volume(4096, hosts=[0])
h = w.open_volume(0, vid)
w.settle()
statuses = [write(w, h, i * 16, 16) for i in range(70)]
first_bad = next(i for i, s in enumerate(statuses) if s != "Ok")
free = sum(s.free_extents for s in w.stores())
print(f"server_level: extent {first_bad} -> {statuses[first_bad]}, "
      f"{free} extents still free in host 1's partition")

try:
    build(config("subsystem_level", 1, 4, 1024)).create_volume(2048)
except InvalidConfig as exc:
    print(f"subsystem_level: {exc}")
w = build(config("asymmetric", 1, 4, 1024))
vid = w.create_volume(2048, policy="full")
print("asymmetric: the same volume spans",
      sorted({loc.subsystem_id for loc in w.authoritative_table(vid).locations}))
