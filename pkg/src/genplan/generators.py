"""Random problem-instance generators for the five bundled domains.

Every generator is a pure function of (size spec, seed). Blocksworld states
are sampled exactly uniformly over the configurations of n labelled blocks
into unordered sets of stacks, by first drawing the stack count with
probability proportional to the Lah number L(n, t) = C(n-1, t-1) * n!/t!
and then cutting a random permutation into t stacks.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from genplan import domains
from genplan.heuristics import hff
from genplan.pddl import DomainDef, GroundAtom, ProblemDef, Task, ground_task


class UnsupportedDomain(Exception):
    pass


class GenerationError(Exception):
    """Rejection sampling failed to find a usable instance."""


@dataclass(frozen=True)
class SizeSpec:
    domain_name: str
    params: tuple[tuple[str, tuple[int, int]], ...]  # name -> (min, max)

    @classmethod
    def of(cls, domain_name: str, **ranges: int | tuple[int, int]) -> "SizeSpec":
        params = []
        for key, val in ranges.items():
            lo, hi = val if isinstance(val, tuple) else (val, val)
            if lo > hi or lo < 0:
                raise ValueError(f"bad range for {key!r}: ({lo}, {hi})")
            params.append((key, (lo, hi)))
        return cls(domain_name, tuple(params))

    def describe(self) -> str:
        parts = ",".join(
            f"{k}={lo}" if lo == hi else f"{k}={lo}..{hi}"
            for k, (lo, hi) in self.params
        )
        return f"{self.domain_name}({parts})"


def _draw_sizes(spec: SizeSpec, rng: random.Random) -> dict[str, int]:
    return {key: rng.randint(lo, hi) for key, (lo, hi) in spec.params}


# ---------------------------------------------------------------------------
# Blocksworld


def _lah_weights(n: int) -> list[int]:
    """L(n, t) for t = 1..n, as exact integers."""
    fact_n = math.factorial(n)
    return [
        math.comb(n - 1, t - 1) * fact_n // math.factorial(t) for t in range(1, n + 1)
    ]


def sample_block_stacks(n: int, rng: random.Random) -> list[list[int]]:
    """Uniform configuration of blocks 0..n-1 into stacks (bottom first)."""
    if n == 0:
        return []
    weights = _lah_weights(n)
    total = sum(weights)
    pick = rng.randrange(total)
    t = 1
    acc = 0
    for i, w in enumerate(weights):
        acc += w
        if pick < acc:
            t = i + 1
            break
    perm = list(range(n))
    rng.shuffle(perm)
    cuts = sorted(rng.sample(range(1, n), t - 1))
    bounds = [0] + cuts + [n]
    return [perm[bounds[i] : bounds[i + 1]] for i in range(t)]


def _blocksworld(rng: random.Random, blocks: int) -> tuple[list, list, list]:
    names = [f"b{i+1}" for i in range(blocks)]
    objects = [(name, "block") for name in names]

    def config_atoms(stacks, include_table: bool):
        atoms = []
        for stack in stacks:
            if include_table:
                atoms.append(("on-table", (names[stack[0]],)))
                atoms.append(("clear", (names[stack[-1]],)))
            for lower, upper in zip(stack, stack[1:]):
                atoms.append(("on", (names[upper], names[lower])))
        return atoms

    init = [("arm-empty", ())] + config_atoms(sample_block_stacks(blocks, rng), True)
    goal = config_atoms(sample_block_stacks(blocks, rng), False)
    return objects, init, goal


# ---------------------------------------------------------------------------
# Gripper


def _gripper(rng: random.Random, balls: int) -> tuple[list, list, list]:
    ball_names = [f"ball{i+1}" for i in range(balls)]
    objects = [(n, "object") for n in ("rooma", "roomb", "left", "right")]
    objects += [(b, "object") for b in ball_names]
    init = [
        ("room", ("rooma",)),
        ("room", ("roomb",)),
        ("gripper", ("left",)),
        ("gripper", ("right",)),
        ("at-robby", ("rooma",)),
        ("free", ("left",)),
        ("free", ("right",)),
    ]
    init += [("ball", (b,)) for b in ball_names]
    init += [("at", (b, "rooma")) for b in ball_names]
    goal = [("at", (b, "roomb")) for b in ball_names]
    return objects, init, goal


# ---------------------------------------------------------------------------
# Ferry


def _ferry(rng: random.Random, cars: int, locations: int) -> tuple[list, list, list]:
    if locations < 2:
        raise GenerationError("ferry needs at least 2 locations")
    car_names = [f"car{i+1}" for i in range(cars)]
    loc_names = [f"loc{i+1}" for i in range(locations)]
    objects = [(c, "car") for c in car_names] + [(l, "location") for l in loc_names]
    init = [("at-ferry", (rng.choice(loc_names),)), ("empty-ferry", ())]
    goal = []
    for car in car_names:
        origin = rng.choice(loc_names)
        dest = rng.choice([l for l in loc_names if l != origin])
        init.append(("at", (car, origin)))
        goal.append(("at", (car, dest)))
    return objects, init, goal


# ---------------------------------------------------------------------------
# Satellite


def _satellite(
    rng: random.Random, satellites: int, instruments: int, modes: int, targets: int
) -> tuple[list, list, list]:
    sat_names = [f"sat{i+1}" for i in range(satellites)]
    mode_names = [f"mode{i+1}" for i in range(modes)]
    dir_names = [f"dir{i+1}" for i in range(targets)]
    objects = [(s, "satellite") for s in sat_names]
    objects += [(m, "mode") for m in mode_names]
    objects += [(d, "direction") for d in dir_names]

    init = []
    supported: set[str] = set()
    ins_count = 0
    for sat in sat_names:
        init.append(("power_avail", (sat,)))
        init.append(("pointing", (sat, rng.choice(dir_names))))
        for _ in range(rng.randint(1, instruments)):
            ins_count += 1
            ins = f"ins{ins_count}"
            objects.append((ins, "instrument"))
            init.append(("on_board", (ins, sat)))
            init.append(("calibration_target", (ins, rng.choice(dir_names))))
            mode_set = [m for m in mode_names if rng.random() < 0.5]
            if not mode_set:
                mode_set = [rng.choice(mode_names)]
            for m in mode_set:
                init.append(("supports", (ins, m)))
                supported.add(m)

    goal = []
    usable = sorted(supported)
    for d in dir_names:
        if rng.random() < 0.8:
            goal.append(("have_image", (d, rng.choice(usable))))
    if not goal:
        goal.append(("have_image", (rng.choice(dir_names), rng.choice(usable))))
    if rng.random() < 0.3:
        goal.append(("pointing", (rng.choice(sat_names), rng.choice(dir_names))))
    return objects, init, goal


# ---------------------------------------------------------------------------
# Logistics


def _logistics(
    rng: random.Random, airplanes: int, cities: int, cityLocations: int, packages: int
) -> tuple[list, list, list]:
    objects = []
    init = []
    airports = []
    locs_by_city: list[list[str]] = []
    for c in range(cities):
        city = f"city{c+1}"
        objects.append((city, "object"))
        init.append(("city", (city,)))
        locs = []
        for l in range(cityLocations):
            loc = f"loc{c+1}-{l+1}"
            objects.append((loc, "object"))
            init.append(("location", (loc,)))
            init.append(("in-city", (loc, city)))
            locs.append(loc)
        airports.append(locs[0])
        init.append(("airport", (locs[0],)))
        locs_by_city.append(locs)
        truck = f"truck{c+1}"
        objects.append((truck, "object"))
        init.append(("truck", (truck,)))
        init.append(("at", (truck, rng.choice(locs))))
    for a in range(airplanes):
        plane = f"plane{a+1}"
        objects.append((plane, "object"))
        init.append(("airplane", (plane,)))
        init.append(("at", (plane, rng.choice(airports))))
    all_locs = [l for locs in locs_by_city for l in locs]
    goal = []
    for p in range(packages):
        pkg = f"pkg{p+1}"
        objects.append((pkg, "object"))
        init.append(("package", (pkg,)))
        origin = rng.choice(all_locs)
        dest = rng.choice([l for l in all_locs if l != origin])
        init.append(("at", (pkg, origin)))
        goal.append(("at", (pkg, dest)))
    return objects, init, goal


_GENERATORS = {
    "blocksworld": (_blocksworld, ("blocks",)),
    "gripper": (_gripper, ("balls",)),
    "ferry": (_ferry, ("cars", "locations")),
    "satellite": (_satellite, ("satellites", "instruments", "modes", "targets")),
    "logistics": (_logistics, ("airplanes", "cities", "cityLocations", "packages")),
}


def generate(spec: SizeSpec, seed: int) -> ProblemDef:
    """Deterministically generate a problem for ``spec`` from ``seed``."""
    if spec.domain_name not in _GENERATORS:
        raise UnsupportedDomain(spec.domain_name)
    fn, required = _GENERATORS[spec.domain_name]
    rng = random.Random(seed)
    sizes = _draw_sizes(spec, rng)
    missing = [k for k in required if k not in sizes]
    if missing:
        raise UnsupportedDomain(
            f"{spec.domain_name} generator needs parameters {missing}"
        )
    unknown = [k for k in sizes if k not in required]
    if unknown:
        raise UnsupportedDomain(
            f"{spec.domain_name} generator got unknown parameters {unknown}"
        )
    objects, init, goal = fn(rng, **sizes)

    domain = domains.load_domain(spec.domain_name)
    pred_index = domain.predicate_index()
    obj_index = {name: i for i, (name, _) in enumerate(objects)}

    def resolve(atoms) -> frozenset[GroundAtom]:
        return frozenset(
            GroundAtom(pred_index[p], tuple(obj_index[o] for o in args))
            for p, args in atoms
        )

    size_tag = "-".join(str(sizes[k]) for k in required)
    name = f"{spec.domain_name}-{size_tag}-seed{seed}"
    return ProblemDef(name, domain.name, tuple(objects), resolve(init), resolve(goal))


def generate_task(spec: SizeSpec, seed: int) -> Task:
    problem = generate(spec, seed)
    return ground_task(domains.load_domain(spec.domain_name), problem)


Distribution = list  # of (SizeSpec, float) pairs


def draw_size_spec(dist: Distribution, rng: random.Random) -> SizeSpec:
    """Weighted draw of one SizeSpec."""
    specs = [s for s, _ in dist]
    weights = [w for _, w in dist]
    if not specs or any(w <= 0 for w in weights):
        raise ValueError("distribution must be non-empty with positive weights")
    return rng.choices(specs, weights=weights, k=1)[0]


MAX_REJECTIONS = 100


def sample_training_instance(dist: Distribution, rng: random.Random) -> Task:
    """Draw a spec by weight and generate a task, rejecting instances whose
    goal is relaxed-unreachable."""
    for _ in range(MAX_REJECTIONS):
        spec = draw_size_spec(dist, rng)
        task = generate_task(spec, rng.randrange(2**31))
        if hff(task, task.init).finite:
            return task
    raise GenerationError(f"no solvable instance in {MAX_REJECTIONS} draws")


# ---------------------------------------------------------------------------
# Default size distributions


def default_training_distribution(domain_name: str) -> Distribution:
    table = {
        "blocksworld": SizeSpec.of("blocksworld", blocks=4),
        "gripper": SizeSpec.of("gripper", balls=3),
        "ferry": SizeSpec.of("ferry", cars=(2, 3), locations=(3, 4)),
        "satellite": SizeSpec.of(
            "satellite", satellites=(1, 3), instruments=(1, 3), modes=(1, 3), targets=(2, 3)
        ),
        "logistics": SizeSpec.of(
            "logistics", airplanes=(2, 3), cities=(2, 3), cityLocations=(2, 3), packages=(1, 2)
        ),
    }
    if domain_name not in table:
        raise UnsupportedDomain(domain_name)
    return [(table[domain_name], 1.0)]


def evaluation_distribution(domain_name: str, scale: float = 1.0) -> Distribution:
    """Held-out evaluation ranges, shrinkable by ``scale`` for desk-size runs."""

    def scaled(lo: int, hi: int, floor: int) -> tuple[int, int]:
        hi2 = max(floor, round(hi * scale))
        lo2 = min(lo, hi2)
        return (lo2, hi2)

    table = {
        "blocksworld": lambda: SizeSpec.of("blocksworld", blocks=scaled(5, 100, 5)),
        "gripper": lambda: SizeSpec.of("gripper", balls=scaled(5, 200, 5)),
        "ferry": lambda: SizeSpec.of(
            "ferry", cars=scaled(2, 120, 4), locations=scaled(4, 40, 4)
        ),
        "satellite": lambda: SizeSpec.of(
            "satellite",
            satellites=scaled(1, 14, 2),
            instruments=scaled(2, 11, 2),
            modes=scaled(1, 6, 2),
            targets=scaled(2, 42, 3),
        ),
        "logistics": lambda: SizeSpec.of(
            "logistics",
            airplanes=scaled(4, 12, 2),
            cities=scaled(4, 15, 2),
            cityLocations=scaled(1, 6, 2),
            packages=scaled(8, 40, 2),
        ),
    }
    if domain_name not in table:
        raise UnsupportedDomain(domain_name)
    return [(table[domain_name](), 1.0)]
