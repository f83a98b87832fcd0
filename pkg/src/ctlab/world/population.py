"""Population-scale scenario: users visiting fixed sensing sites.

Each user makes ``encounter_count`` visits.  A visit picks a site uniformly,
starts just outside WiFi range in a random direction, walks straight to a
point inside BT range, stays there for ``duration`` seconds and walks out in
another random direction at the same speed.  Visits fall in the configured
daily time windows.

Only site receptions are modelled, and the engine works per visit rather
than per tick: within a visit the in-range stretch of a straight path is one
interval, so receptions can be generated in bulk.  Emission instants are
still snapped up to the 100 ms tick grid.  A site's BLE scanner reports an
advertising payload at most once per ``scan_interval``.
"""

from __future__ import annotations

import math

import numpy as np

from ctlab.protocol import DEFAULT_CLOCK, EpochClock, KeySchedule
from ctlab.world.eventlog import BT, WIFI, EventLog, EventLogBuilder, Tag
from ctlab.world.model import DeviceState, Table6Params

TICK = 0.1
# visits start/end this far outside WiFi range
_MARGIN = 10.0
# dwell points are drawn inside this fraction of r_bt
_DWELL_FRACTION = 0.9
# minimum gap between consecutive visits of one device
_VISIT_GAP = 60.0


def _unique_macs(rng: np.random.Generator, n: int) -> list[int]:
    macs: list[int] = []
    seen: set[int] = set()
    while len(macs) < n:
        for m in rng.integers(0, 1 << 48, size=n - len(macs) + 8).tolist():
            m = (m | (1 << 41)) & ~(1 << 40)
            if m not in seen:
                seen.add(m)
                macs.append(m)
                if len(macs) == n:
                    break
    return macs


def sample_population(params: Table6Params, seed: int, clock: EpochClock = DEFAULT_CLOCK,
                      bystanders: bool = False) -> list[DeviceState]:
    """Population users (``population`` devices, ids ``0..population-1``).

    With ``bystanders`` the tags left over after every user got one are
    handed to extra app-less devices appended after the users.
    """
    s_pop, s_keys, _ = np.random.SeedSequence(seed).spawn(3)
    rng = np.random.default_rng(s_pop)
    n = params.population
    k = params.infected_count
    if n == 0:
        return []
    infected = np.zeros(n, dtype=bool)
    infected[rng.choice(n, size=k, replace=False)] = True

    speed = rng.uniform(*params.speed, size=n)
    bt_rate = rng.uniform(*params.bt_frequency, size=n)
    wifi_rate = rng.uniform(*params.wifi_frequency, size=n)
    encounters = rng.integers(params.encounter_count[0], params.encounter_count[1] + 1, size=n)
    for name, arr in (("speed", speed), ("bt_frequency", bt_rate),
                      ("wifi_frequency", wifi_rate), ("encounter_count", encounters)):
        value = params.override(name)
        if value is not None:
            arr[infected] = value

    macs = _unique_macs(rng, params.tags)
    tag_list = [Tag(m, f"net-{i:05d}-{m & 0xFFFF:04x}") for i, m in enumerate(macs)]
    owned: list[list[Tag]] = [[] for _ in range(n)]
    # infected tags go to a random subset of infected users, the rest keep WiFi off
    inf_members = rng.permutation(np.flatnonzero(infected))[:params.infected_tags]
    normal_members = rng.permutation(np.flatnonzero(~infected))
    rest = tag_list[params.infected_tags:]
    for dev, tag in zip(inf_members, tag_list[:params.infected_tags]):
        owned[dev].append(tag)
    for dev, tag in zip(normal_members, rest):
        owned[dev].append(tag)
    spare = rest[len(normal_members):]

    key_seeds = s_keys.spawn(n)
    users = [
        DeviceState(
            device_id=i,
            speed=float(speed[i]),
            bt_rate=float(bt_rate[i]),
            wifi_rate=float(wifi_rate[i]),
            tags=owned[i],
            infected=bool(infected[i]),
            wifi_enabled=bool(owned[i]),
            keys=KeySchedule(key_seeds[i], clock),
            encounter_count=int(encounters[i]),
        )
        for i in range(n)
    ]
    if not bystanders:
        return users
    # tags beyond the user population belong to phones without the tracing
    # app: they probe WiFi like anyone else but never advertise over BLE
    b = len(spare)
    b_speed = rng.uniform(*params.speed, size=b)
    b_wifi = rng.uniform(*params.wifi_frequency, size=b)
    b_enc = rng.integers(params.encounter_count[0], params.encounter_count[1] + 1, size=b)
    return users + [
        DeviceState(
            device_id=n + i,
            role="bystander",
            speed=float(b_speed[i]),
            bt_rate=0.0,
            wifi_rate=float(b_wifi[i]),
            tags=[tag],
            encounter_count=int(b_enc[i]),
        )
        for i, tag in enumerate(spare)
    ]


def _disk_entry(ax, ay, bx, by, radius):
    """Fraction along segment A->B where it first enters the disk |p| <= radius.

    A is outside and B inside the disk, so exactly one crossing exists.
    """
    dx, dy = bx - ax, by - ay
    a = dx * dx + dy * dy
    b = 2 * (ax * dx + ay * dy)
    c = ax * ax + ay * ay - radius * radius
    disc = np.sqrt(np.maximum(b * b - 4 * a * c, 0.0))
    return np.clip((-b - disc) / (2 * a), 0.0, 1.0)


class Visits:
    """Vectorised visit table; times are absolute seconds."""

    def __init__(self, params: Table6Params, devices: list[DeviceState], seed: int):
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])
        counts = np.array([d.encounter_count for d in devices], dtype=np.int64)
        dev = np.repeat(np.arange(len(devices)), counts)
        v = len(dev)
        self.device = dev
        self.site = rng.integers(0, params.sensors, size=v)
        windows = np.array(params.time, dtype=float)
        win = rng.integers(0, len(windows), size=v)
        arrive = rng.uniform(windows[win, 0], windows[win, 1])
        self.dwell = rng.uniform(*params.duration, size=v)
        dur_override = params.override("duration")
        if dur_override is not None:
            self.dwell[np.array([devices[i].infected for i in dev], dtype=bool)] = dur_override
        self.speed = np.array([d.speed for d in devices])[dev] if v else np.zeros(0)
        start_r = params.r_wifi + _MARGIN
        th_in = rng.uniform(0, 2 * np.pi, size=v)
        th_out = rng.uniform(0, 2 * np.pi, size=v)
        rho = params.r_bt * _DWELL_FRACTION * np.sqrt(rng.uniform(size=v))
        th_q = rng.uniform(0, 2 * np.pi, size=v)
        self.ax, self.ay = start_r * np.cos(th_in), start_r * np.sin(th_in)
        self.qx, self.qy = rho * np.cos(th_q), rho * np.sin(th_q)
        self.bx, self.by = start_r * np.cos(th_out), start_r * np.sin(th_out)
        self.t_in = np.hypot(self.qx - self.ax, self.qy - self.ay) / np.maximum(self.speed, 1e-9)
        self.t_out = np.hypot(self.bx - self.qx, self.by - self.qy) / np.maximum(self.speed, 1e-9)

        # a device cannot be at two sites at once: push overlapping visits later
        order = np.lexsort((arrive, dev))
        span = self.t_in + self.dwell + self.t_out
        last_dev, free_at = -1, -np.inf
        for i in order.tolist():
            if dev[i] != last_dev:
                last_dev, free_at = dev[i], -np.inf
            if arrive[i] < free_at:
                arrive[i] = free_at
            free_at = arrive[i] + span[i] + _VISIT_GAP
        self.start = arrive
        grid = math.ceil(math.sqrt(params.sensors))
        self.cx = (self.site % grid) * params.sensor_spacing
        self.cy = (self.site // grid) * params.sensor_spacing

    def __len__(self):
        return len(self.device)

    @property
    def end(self):
        return self.start + self.t_in + self.dwell + self.t_out

    def relative_position(self, idx, t):
        """Position relative to the visited site at absolute times ``t``."""
        u = t - self.start[idx]
        t_in, dwell = self.t_in[idx], self.dwell[idx]
        f_in = np.clip(u / np.maximum(t_in, 1e-9), 0, 1)
        f_out = np.clip((u - t_in - dwell) / np.maximum(self.t_out[idx], 1e-9), 0, 1)
        ax, ay, qx, qy, bx, by = (a[idx] for a in (self.ax, self.ay, self.qx, self.qy, self.bx, self.by))
        x = np.where(u < t_in, ax + (qx - ax) * f_in, qx + (bx - qx) * f_out)
        y = np.where(u < t_in, ay + (qy - ay) * f_in, qy + (by - qy) * f_out)
        return x, y

    def range_interval(self, radius):
        """Absolute [enter, leave] times of each visit inside ``radius``."""
        u_in = _disk_entry(self.ax, self.ay, self.qx, self.qy, radius)
        u_out = 1.0 - _disk_entry(self.bx, self.by, self.qx, self.qy, radius)
        enter = self.start + u_in * self.t_in
        leave = self.start + self.t_in + self.dwell + u_out * self.t_out
        return enter, leave


def _snap(t):
    return np.ceil(np.round(t / TICK, 6)) * TICK


def run_population(params: Table6Params, seed: int, devices: list[DeviceState] | None = None,
                   clock: EpochClock = DEFAULT_CLOCK) -> EventLog:
    if devices is None:
        devices = sample_population(params, seed, clock, bystanders=True)
    n = len(devices)
    sensors = [DeviceState(device_id=n + s, role="sensor", name=f"sensor-{s}", bt_range=params.r_bt)
               for s in range(params.sensors)] if n else []
    builder = EventLogBuilder()
    if n == 0:
        return builder.build(devices)
    visits = Visits(params, devices, seed)
    phase_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(4)[3])
    bt_phase = phase_rng.uniform(0, 1, size=n) / np.array([max(d.bt_rate, 1e-9) for d in devices])
    bt_rate = np.array([d.bt_rate for d in devices])

    # --- BLE: first advert in each scan window the device spends in BT range
    enter, leave = visits.range_interval(params.r_bt)
    scan = params.scan_interval
    w_lo = np.floor(enter / scan).astype(np.int64)
    w_hi = np.floor(leave / scan).astype(np.int64)
    n_win = np.maximum(w_hi - w_lo + 1, 0)
    n_win[bt_rate[visits.device] <= 0] = 0
    vidx = np.repeat(np.arange(len(visits)), n_win)
    win = np.repeat(w_lo, n_win) + (np.arange(n_win.sum()) - np.repeat(np.cumsum(n_win) - n_win, n_win))
    lo = np.maximum(win * scan, enter[vidx])
    hi = np.minimum((win + 1) * scan, leave[vidx])
    d = visits.device[vidx]
    rate, phase = bt_rate[d], bt_phase[d]
    j = np.ceil((lo - TICK - phase) * rate)
    tau = _snap(phase + j / rate)
    for _ in range(3):
        behind = tau < lo - 1e-9
        j = np.where(behind, j + 1, j)
        tau = np.where(behind, _snap(phase + j / rate), tau)
    keep = (tau <= hi + 1e-9) & (tau < (win + 1) * scan) & (tau <= leave[vidx] + 1e-9)
    vidx, tau, d = vidx[keep], tau[keep], d[keep]
    # drop the rare tick-snap that lands just past the range boundary
    x, y = visits.relative_position(vidx, tau)
    dist = np.hypot(x, y)
    ok = dist <= params.r_bt
    vidx, tau, d, x, y, dist = vidx[ok], tau[ok], d[ok], x[ok], y[ok], dist[ok]

    epoch = np.floor(tau / clock.epoch_len).astype(np.int64)
    pair = d * (1 << 32) + epoch
    uniq, inverse = np.unique(pair, return_inverse=True)
    payload = np.empty(len(uniq), dtype=np.int64)
    for u_i, key in enumerate(uniq.tolist()):
        dev_id, ep = key >> 32, key & 0xFFFFFFFF
        code = devices[dev_id].keys.code_at(ep * clock.epoch_len)
        payload[u_i] = builder.code_index(code, dev_id)
    builder.add_columns(
        time=tau, kind=np.full(len(tau), BT), emitter=d, receiver=n + visits.site[vidx],
        payload=payload[inverse], distance=dist,
        ex=x + visits.cx[vidx], ey=y + visits.cy[vidx],
    )

    # --- WiFi: Poisson probes during each visit, heard inside r_wifi
    wifi_rate = np.array([d.wifi_rate if d.tag is not None else 0.0 for d in devices]) / 3600
    rate_v = wifi_rate[visits.device]
    span = visits.end - visits.start
    probe_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(5)[4])
    counts = probe_rng.poisson(rate_v * span)
    pv = np.repeat(np.arange(len(visits)), counts)
    pt = _snap(visits.start[pv] + probe_rng.uniform(size=len(pv)) * span[pv])
    px, py = visits.relative_position(pv, pt)
    pdist = np.hypot(px, py)
    heard = pdist <= params.r_wifi
    pv, pt, px, py, pdist = pv[heard], pt[heard], px[heard], py[heard], pdist[heard]
    pdev = visits.device[pv]
    tag_idx = np.array([builder.tag_index(devices[i].tag) for i in pdev.tolist()], dtype=np.int64)
    builder.add_columns(
        time=pt, kind=np.full(len(pt), WIFI), emitter=pdev, receiver=n + visits.site[pv],
        payload=tag_idx, distance=pdist, ex=px + visits.cx[pv], ey=py + visits.cy[pv],
    )
    log = builder.build(devices + sensors)
    log.visits = visits
    log.params = params
    return log

