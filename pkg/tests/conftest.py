from __future__ import annotations

from dataclasses import dataclass

import pytest

from sdesim.sde import EdgeController, EdgeSwitch, ServiceConfig
from sdesim.simnet import Link, Network, Node, Packet, Simulator

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class Stub(Node):
    """Records every packet that reaches it."""

    def __init__(self, node_id):
        super().__init__(node_id)
        self.got: list[Packet] = []

    def receive(self, packet, link):
        self.got.append(packet)


SERVICE = ("kv", 80)
CLIENT = ("c1", 40000)
PRIMARY = ("s3", 80)
SECONDARY = ("s4", 80)


@dataclass
class EdgeRig:
    sim: Simulator
    net: Network
    switch: EdgeSwitch
    controller: EdgeController
    client: Stub
    dc: dict

    def from_client(self, seq=0, ack=0, flags=0, payload=b"", flow="f1"):
        self.net.send("c1", Packet(CLIENT, SERVICE, flow, seq, ack, flags, payload))
        self.settle()

    def from_dc(self, name, seq=0, ack=0, flags=0, payload=b"", flow="f1"):
        self.net.send(name, Packet((name, 80), CLIENT, flow, seq, ack, flags, payload))
        self.settle()

    def settle(self, us=20_000):
        self.sim.run_until(self.sim.now + us)

    def clear(self):
        self.client.got.clear()
        for d in self.dc.values():
            d.got.clear()


def make_rig(critical=False, threshold=5, duplication=True, delay_us=1000) -> EdgeRig:
    sim = Simulator(seed=7)
    net = Network(sim)
    client = net.add_node(Stub("c1"))
    sw = net.add_node(EdgeSwitch("s2", ["c1"]))
    dcs = {name: net.add_node(Stub(name)) for name in ("s3", "s4")}
    for other in ("c1", "s3", "s4"):
        net.add_link(Link("s2", other, delay_us, 1_000_000_000))
    net.set_gateway("c1", "s2")
    ctl = EdgeController([ServiceConfig(SERVICE, PRIMARY, SECONDARY, critical)], threshold,
                         duplication)
    ctl.attach(sw)
    return EdgeRig(sim, net, sw, ctl, client, dcs)


@pytest.fixture
def rig():
    return make_rig()


@pytest.fixture
def critical_rig():
    return make_rig(critical=True)
