#!/usr/bin/env python3
"""Regenerates testdata/descriptors: NNN.input.json (loosely written
documents) and NNN.canonical.json (expected canonical bytes).

The canonicalizer here is written from the wire contract alone and shares
no code with the Rust codec.
"""

import json
import random
from pathlib import Path

HERE = Path(__file__).resolve().parent
OUT = HERE / "descriptors"
SEED = 20160606

SENSORS = ["light", "camera", "microphone", "sonar", "touch", "compass", "gyro", "temperature"]
ACTUATORS = ["kicking-arm", "movement-motor", "gripper-arm", "speaker", "lamp", "pan-tilt"]
TASKS = ["fire-suppression", "patrol", "mapping", "delivery", "inspection"]
UNITS = ["lux", "deg", "m/s", "dB", "cm", "C", "frame", ""]
STATES = ["IDLE", "ASSIGNED", "EXECUTING", "FAILED", "OFFLINE"]
PROTOCOLS = ["nxt", "ros", "sim", "mavlink", ""]


def dumps(v):
    return json.dumps(v, separators=(",", ":"), ensure_ascii=False, sort_keys=True)


def scalar(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return v


def tag(s):
    return s.strip().lower()


def entry(e, labels):
    if isinstance(e, list):
        vals = list(e) + [""] * (3 - len(e))
        e = dict(zip(labels, vals))
    out = {k: e.get(k, "") for k in labels}
    out[labels[0]] = tag(out[labels[0]])
    return out


def canonical(doc):
    dyn = doc.get("dynamic", {})
    loc = dyn.get("location", [0, 0])
    inter = doc.get("interaction", {})
    blocks = [
        ("ph", {k: scalar(v) for k, v in doc.get("ph", {}).items()}),
        ("sen", [entry(e, ["sname", "sval", "su"]) for e in doc.get("sen", [])]),
        ("act", [entry(e, ["aname", "aval", "au"]) for e in doc.get("act", [])]),
        ("info", [{"n": i.get("n", ""), "vs": scalar(i.get("vs", ""))} for i in doc.get("info", [])]),
        ("behavioral", {"supported_tasks": [tag(t) for t in doc.get("behavioral", {}).get("supported_tasks", [])]}),
        (
            "dynamic",
            {
                "battery_pct": float(dyn.get("battery_pct", 100)),
                "location": [float(loc[0]), float(loc[1])],
                "state": dyn.get("state", "IDLE"),
            },
        ),
        ("interaction", {"endpoint": inter.get("endpoint", ""), "protocol": inter.get("protocol", "")}),
    ]
    parts = []
    rid = doc.get("robotid", "").strip()
    if rid:
        parts.append('"robotid":' + dumps(rid))
    parts += ['"%s":%s' % (k, dumps(v)) for k, v in blocks]
    return "{" + ",".join(parts) + "}"


def messy(rng, name):
    """Random capitalization and padding; canonical form lowercases/trims."""
    name = "".join(c.upper() if rng.random() < 0.3 else c for c in name)
    return " " * rng.randint(0, 2) + name + " " * rng.randint(0, 1)


def rng_range(rng):
    lo = rng.randint(-50, 50)
    return "(%d,%d)" % (lo, lo + rng.randint(0, 200))


def spec(rng, names, labels):
    out = []
    for n in rng.sample(names, rng.randint(0, min(3, len(names)))):
        vals = [messy(rng, n), rng_range(rng) if rng.random() < 0.8 else "", rng.choice(UNITS)]
        if rng.random() < 0.4:
            out.append(vals[: rng.randint(1, 3)])
        else:
            keys = list(zip(labels, vals))
            rng.shuffle(keys)
            out.append(dict(keys))
    return out


def generate(rng, i):
    doc = {}
    if rng.random() < 0.7:
        doc["robotid"] = ("rob-%d" % (i + 1)) if rng.random() < 0.5 else "  r_%03d.x~ " % i
    if rng.random() < 0.8:
        doc["ph"] = {
            "model": rng.choice(["nxt-2.0", "ev3", "turtlebot"]),
            "mass_kg": rng.choice([0.6, 0.8, 1, "1.5"]),
            "wheels": rng.choice([2, 3, 4]),
            "outdoor": rng.choice([True, False]),
        }
    if rng.random() < 0.9:
        doc["sen"] = spec(rng, SENSORS, ["sname", "sval", "su"])
    if rng.random() < 0.9:
        doc["act"] = spec(rng, ACTUATORS, ["aname", "aval", "au"])
    if rng.random() < 0.7:
        doc["info"] = [{"n": "vendor", "vs": rng.choice(["lego", "clearpath", "Ünïcode \"q\""])}]
        if rng.random() < 0.5:
            doc["info"].append({"vs": rng.randint(1, 9), "n": "rev"})
    if rng.random() < 0.6:
        doc["behavioral"] = {"supported_tasks": [messy(rng, t) for t in rng.sample(TASKS, rng.randint(0, 2))]}
    if rng.random() < 0.8:
        dyn = {
            "state": rng.choice(STATES),
            "battery_pct": rng.choice([0, 12.5, 57, 99.75, 100]),
            "location": [rng.randint(-20, 20) / 4, rng.choice([0, 1, 2.5, -3])],
        }
        doc["dynamic"] = dict(rng.sample(list(dyn.items()), len(dyn)))
    if rng.random() < 0.8:
        doc["interaction"] = {
            "protocol": rng.choice(PROTOCOLS),
            "endpoint": rng.choice(["", "tcp://10.0.0.%d:7000" % i, "http://robot-%d.local/api" % i]),
        }
    items = list(doc.items())
    rng.shuffle(items)
    return dict(items)


def main():
    OUT.mkdir(exist_ok=True)
    for old in OUT.glob("*.json"):
        old.unlink()
    rng = random.Random(SEED)
    docs = [json.loads((HERE / "fleet" / f).read_text()) for f in ["light.robot.senml.json", "arms.robot.senml.json"]]
    docs += [generate(rng, i) for i in range(58)]
    for i, doc in enumerate(docs):
        indent = rng.choice([None, 1, 2, 4])
        (OUT / ("%03d.input.json" % i)).write_text(json.dumps(doc, indent=indent, ensure_ascii=rng.random() < 0.5))
        (OUT / ("%03d.canonical.json" % i)).write_text(canonical(doc))


if __name__ == "__main__":
    main()
