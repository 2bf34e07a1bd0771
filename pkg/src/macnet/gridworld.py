"""Synthetic grid-world scenes, functional programs and question generation.

Programs are nested lists, e.g.::

    ["query", "color", ["unique", ["filter", "shape", "cube", ["scene"]]]]

Set-valued nodes: scene, filter, relate, and, or.
Object-valued:    unique.
Integer-valued:   count.
Answer-valued:    exist, query, equal, greater, less.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SHAPES = ("cube", "sphere", "cylinder")
COLORS = ("red", "blue", "green", "yellow", "gray", "purple")
SIZES = ("small", "large")
MATERIALS = ("rubber", "metal")
ATTRIBUTES = {"size": SIZES, "color": COLORS, "material": MATERIALS, "shape": SHAPES}
ATTR_ORDER = ("size", "color", "material", "shape")
DIRECTIONS = ("left", "right", "front", "behind")
CATEGORIES = ("count", "exist", "compare_numbers", "query_attribute", "compare_attribute")

PLURAL = {"cube": "cubes", "sphere": "spheres", "cylinder": "cylinders", "object": "objects"}
REL_WORDS = {
    "left": ("left", "of"),
    "right": ("right", "of"),
    "front": ("in", "front", "of"),
    "behind": ("behind",),
}
SYNONYMS = {"object": "thing", "objects": "things", "cube": "block", "cubes": "blocks",
            "sphere": "ball", "spheres": "balls", "large": "big", "small": "tiny",
            "metal": "shiny", "rubber": "matte"}


class SceneError(ValueError):
    pass


class ProgramError(ValueError):
    pass


class AmbiguityError(ProgramError):
    """A ``unique`` node saw a set whose size is not one."""


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneObject:
    row: int
    col: int
    shape: str
    color: str
    size: str
    material: str

    def attr(self, name: str) -> str:
        return getattr(self, name)

    def to_dict(self) -> dict:
        return {"row": self.row, "col": self.col, "shape": self.shape,
                "color": self.color, "size": self.size, "material": self.material}


@dataclass(frozen=True)
class Scene:
    grid_size: int
    objects: tuple[SceneObject, ...]

    def __post_init__(self):
        seen = set()
        for o in self.objects:
            if not (0 <= o.row < self.grid_size and 0 <= o.col < self.grid_size):
                raise SceneError(f"object at ({o.row},{o.col}) outside {self.grid_size}x{self.grid_size} grid")
            if (o.row, o.col) in seen:
                raise SceneError(f"two objects share cell ({o.row},{o.col})")
            seen.add((o.row, o.col))
            for name, values in ATTRIBUTES.items():
                if o.attr(name) not in values:
                    raise SceneError(f"unknown {name} {o.attr(name)!r}")

    def to_dict(self) -> dict:
        return {"grid_size": self.grid_size, "objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(d["grid_size"], tuple(SceneObject(**o) for o in d["objects"]))


@dataclass
class QAInstance:
    scene: Scene
    tokens: list[str]
    program: list
    answer: str
    category: str

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "scene": self.scene.to_dict(), "program": self.program,
                "answer": self.answer, "category": self.category}

    @classmethod
    def from_dict(cls, d: dict) -> "QAInstance":
        return cls(Scene.from_dict(d["scene"]), list(d["tokens"]), d["program"], d["answer"], d["category"])


def answer_vocabulary(grid_size: int) -> list[str]:
    return ([*COLORS, *SHAPES, *SIZES, *MATERIALS, "yes", "no"]
            + [str(n) for n in range(grid_size * grid_size + 1)])


def word_vocabulary() -> list[str]:
    """Every word the templates (and the paraphrase option) can emit."""
    words = {"what", "is", "the", "how", "many", "are", "there", "a", "an", "any", "?",
             "more", "fewer", "than", "same", "as", "or", "and", "both", "object", "objects",
             "does", "have"}
    for name, values in ATTRIBUTES.items():
        words.add(name)
        words.update(values)
    words.update(PLURAL.values())
    for ws in REL_WORDS.values():
        words.update(ws)
    words.update(SYNONYMS.values())
    return sorted(words)


# ---------------------------------------------------------------- scenes

def generate_scene(rng: np.random.Generator, n_objects: int, grid_size: int = 5) -> Scene:
    if not 2 <= n_objects <= grid_size * grid_size:
        raise SceneError(f"n_objects must lie in [2, {grid_size * grid_size}], got {n_objects}")
    cells = rng.choice(grid_size * grid_size, size=n_objects, replace=False)
    objects = []
    for cell in sorted(int(c) for c in cells):
        objects.append(SceneObject(
            row=cell // grid_size,
            col=cell % grid_size,
            shape=SHAPES[rng.integers(len(SHAPES))],
            color=COLORS[rng.integers(len(COLORS))],
            size=SIZES[rng.integers(len(SIZES))],
            material=MATERIALS[rng.integers(len(MATERIALS))],
        ))
    return Scene(grid_size, tuple(objects))


# ---------------------------------------------------------------- execution

def related(scene: Scene, anchor: int, direction: str) -> frozenset[int]:
    a = scene.objects[anchor]
    if direction == "left":
        test = lambda o: o.col < a.col
    elif direction == "right":
        test = lambda o: o.col > a.col
    elif direction == "front":
        test = lambda o: o.row > a.row
    elif direction == "behind":
        test = lambda o: o.row < a.row
    else:
        raise ProgramError(f"unknown direction {direction!r}")
    return frozenset(i for i, o in enumerate(scene.objects) if test(o))


SET_OPS = {"scene", "filter", "relate", "and", "or"}
ANSWER_OPS = {"exist", "query", "equal", "greater", "less", "count"}


def _eval(node, scene: Scene):
    op = node[0]
    if op == "scene":
        return frozenset(range(len(scene.objects)))
    if op == "filter":
        _, attr, value, child = node
        return frozenset(i for i in _eval(child, scene) if scene.objects[i].attr(attr) == value)
    if op == "relate":
        return related(scene, _eval(node[2], scene), node[1])
    if op == "unique":
        s = _eval(node[1], scene)
        if len(s) != 1:
            raise AmbiguityError(f"unique over {len(s)} objects")
        return next(iter(s))
    if op == "and":
        return _eval(node[1], scene) & _eval(node[2], scene)
    if op == "or":
        return _eval(node[1], scene) | _eval(node[2], scene)
    if op == "count":
        return len(_eval(node[1], scene))
    if op == "exist":
        return "yes" if _eval(node[1], scene) else "no"
    if op == "query":
        return scene.objects[_eval(node[2], scene)].attr(node[1])
    if op == "equal":
        a, b = _eval(node[2], scene), _eval(node[3], scene)
        return "yes" if scene.objects[a].attr(node[1]) == scene.objects[b].attr(node[1]) else "no"
    if op in ("greater", "less"):
        a, b = _eval(node[1], scene), _eval(node[2], scene)
        return "yes" if (a > b if op == "greater" else a < b) else "no"
    raise ProgramError(f"unknown program node {op!r}")


def execute_program(program, scene: Scene) -> str:
    """Evaluate ``program`` bottom-up over object-index sets; returns the answer word."""
    result = _eval(program, scene)
    return str(result) if isinstance(result, int) and program[0] == "count" else result


def node_type(node) -> str:
    """Type-check ``node`` and return one of set/object/int/answer."""
    op = node[0]
    arity = {"scene": 1, "filter": 4, "relate": 3, "unique": 2, "and": 3, "or": 3, "count": 2,
             "exist": 2, "query": 3, "equal": 4, "greater": 3, "less": 3}
    if op not in arity:
        raise ProgramError(f"unknown program node {op!r}")
    if len(node) != arity[op]:
        raise ProgramError(f"{op} expects {arity[op] - 1} arguments")

    def want(child, t):
        got = node_type(child)
        if got != t:
            raise ProgramError(f"{op} needs a {t} input, got {got}")

    if op == "scene":
        return "set"
    if op == "filter":
        if node[1] not in ATTRIBUTES or node[2] not in ATTRIBUTES[node[1]]:
            raise ProgramError(f"bad filter {node[1]}={node[2]}")
        want(node[3], "set")
        return "set"
    if op == "relate":
        if node[1] not in DIRECTIONS:
            raise ProgramError(f"unknown direction {node[1]!r}")
        want(node[2], "object")
        return "set"
    if op == "unique":
        want(node[1], "set")
        return "object"
    if op in ("and", "or"):
        want(node[1], "set")
        want(node[2], "set")
        return "set"
    if op in ("count", "exist"):
        want(node[1], "set")
        return "int" if op == "count" else "answer"
    if op == "query":
        if node[1] not in ATTRIBUTES:
            raise ProgramError(f"unknown attribute {node[1]!r}")
        want(node[2], "object")
        return "answer"
    if op == "equal":
        if node[1] not in ATTRIBUTES:
            raise ProgramError(f"unknown attribute {node[1]!r}")
        want(node[2], "object")
        want(node[3], "object")
        return "answer"
    want(node[1], "int")
    want(node[2], "int")
    return "answer"


def reasoning_depth(node) -> int:
    """Longest chain of non-filter, non-unique operations from root to leaf."""
    op = node[0]
    children = [c for c in node[1:] if isinstance(c, list)]
    below = max((reasoning_depth(c) for c in children), default=0)
    return below + (0 if op in ("filter", "unique", "scene") else 1)


def check_program(program, max_depth: int = 5) -> None:
    t = node_type(program)
    if t not in ("answer", "int"):
        raise ProgramError(f"program root must produce an answer, got {t}")
    depth = reasoning_depth(program)
    if depth > max_depth:
        raise ProgramError(f"program depth {depth} exceeds {max_depth}")


def category_of(program) -> str:
    return {"count": "count", "exist": "exist", "greater": "compare_numbers",
            "less": "compare_numbers", "query": "query_attribute",
            "equal": "compare_attribute"}[program[0]]


def is_relational(program) -> bool:
    if program[0] == "relate":
        return True
    return any(isinstance(c, list) and is_relational(c) for c in program[1:])


def relate_hops(program) -> int:
    """Longest chain of nested relate nodes."""
    children = [c for c in program[1:] if isinstance(c, list)]
    below = max((relate_hops(c) for c in children), default=0)
    return below + (1 if program[0] == "relate" else 0)


# ---------------------------------------------------------------- rendering

def _filters_of(node) -> tuple[dict, list]:
    """Peel a filter chain; returns ({attr: value}, base node)."""
    filters = {}
    while node[0] == "filter":
        filters[node[1]] = node[2]
        node = node[3]
    return filters, node


def _noun_phrase(filters: dict, plural: bool) -> list[str]:
    words = [filters[a] for a in ("size", "color", "material") if a in filters]
    noun = filters.get("shape", "object")
    words.append(PLURAL[noun] if plural else noun)
    return words


def render_set(node, plural: bool) -> list[str]:
    filters, base = _filters_of(node)
    words = _noun_phrase(filters, plural)
    if base[0] == "relate":
        words += [*REL_WORDS[base[1]], "the", *render_object(base[2])]
    elif base[0] != "scene":
        raise ProgramError(f"cannot render set base {base[0]!r}")
    return words


def render_object(unique_node) -> list[str]:
    return render_set(unique_node[1], plural=False)


def render_question(program) -> list[str]:
    op = program[0]
    if op == "query":
        return ["what", program[1], "is", "the", *render_object(program[2]), "?"]
    if op == "exist":
        return ["is", "there", "a", *render_set(program[1], plural=False), "?"]
    if op == "count":
        inner = program[1]
        if inner[0] == "or":
            return ["how", "many", *render_set(inner[1], True), "or",
                    *render_set(inner[2], True), "are", "there", "?"]
        if inner[0] == "and":
            a, b = inner[1], inner[2]
            return ["how", "many", "objects", "are", "both", *REL_WORDS[a[1]], "the",
                    *render_object(a[2]), "and", *REL_WORDS[b[1]], "the", *render_object(b[2]), "?"]
        return ["how", "many", *render_set(inner, True), "are", "there", "?"]
    if op in ("greater", "less"):
        return ["are", "there", "more" if op == "greater" else "fewer",
                *render_set(program[1][1], True), "than", *render_set(program[2][1], True), "?"]
    if op == "equal":
        return ["does", "the", *render_object(program[2]), "have", "the", "same", program[1],
                "as", "the", *render_object(program[3]), "?"]
    raise ProgramError(f"cannot render root {op!r}")


def paraphrase(tokens: list[str], rng: np.random.Generator, p: float = 0.5) -> list[str]:
    return [SYNONYMS[w] if w in SYNONYMS and rng.random() < p else w for w in tokens]


# ---------------------------------------------------------------- generation

def _filter_chain(filters: dict, base) -> list:
    node = base
    for attr in reversed(ATTR_ORDER):
        if attr in filters:
            node = ["filter", attr, filters[attr], node]
    return node


def _matches(obj: SceneObject, filters: dict) -> bool:
    return all(obj.attr(a) == v for a, v in filters.items())


def _distinguishing_filters(scene, target: int, pool, rng, min_attrs: int) -> dict | None:
    obj = scene.objects[target]
    attrs = list(ATTR_ORDER)
    for k in range(min_attrs, len(attrs) + 1):
        subsets = []
        for mask in range(1 << len(attrs)):
            chosen = [a for j, a in enumerate(attrs) if mask >> j & 1]
            if len(chosen) == k:
                subsets.append(chosen)
        for idx in rng.permutation(len(subsets)):
            filters = {a: obj.attr(a) for a in subsets[idx]}
            if [i for i in pool if _matches(scene.objects[i], filters)] == [target]:
                return filters
    return None


class QuestionGenerator:
    """Samples type-correct programs guided by the scene so that references resolve."""

    def __init__(self, max_depth: int = 5, max_hops: int = 2, paraphrase_prob: float = 0.0,
                 max_retries: int = 50):
        self.max_depth = max_depth
        self.max_hops = max_hops
        self.paraphrase_prob = paraphrase_prob
        self.max_retries = max_retries

    def _hops(self, rng) -> int:
        return int(rng.integers(self.max_hops + 1))

    def refer(self, scene: Scene, rng, hops: int):
        """Program for a uniquely identified object reached through ``hops`` relations."""
        if hops == 0:
            pool = list(range(len(scene.objects)))
            base = ["scene"]
        else:
            anchor_prog, anchor = self.refer(scene, rng, hops - 1)
            dirs = [d for d in rng.permutation(DIRECTIONS) if related(scene, anchor, d)]
            if not dirs:
                raise AmbiguityError("anchor has no related objects")
            direction = str(dirs[0])
            pool = sorted(related(scene, anchor, direction))
            base = ["relate", direction, anchor_prog]
        for target in rng.permutation(pool):
            filters = _distinguishing_filters(scene, int(target), pool, rng, 1 if hops == 0 else 0)
            if filters is not None:
                return ["unique", _filter_chain(filters, base)], int(target)
        raise AmbiguityError("no object can be singled out")

    def some_set(self, scene: Scene, rng, hops: int, from_object: bool = True):
        """A set expression: one or two filters over the scene or a relation."""
        if hops == 0:
            base, pool = ["scene"], list(range(len(scene.objects)))
        else:
            anchor_prog, anchor = self.refer(scene, rng, hops - 1)
            direction = str(DIRECTIONS[rng.integers(len(DIRECTIONS))])
            base, pool = ["relate", direction, anchor_prog], sorted(related(scene, anchor, direction))
        n_filters = int(rng.integers(1, 3)) if hops == 0 else int(rng.integers(0, 3))
        attrs = [str(a) for a in rng.permutation(ATTR_ORDER)[:n_filters]]
        if from_object and pool:
            src = scene.objects[int(rng.choice(pool))]
            filters = {a: src.attr(a) for a in attrs}
        else:
            filters = {a: str(rng.choice(ATTRIBUTES[a])) for a in attrs}
        return _filter_chain(filters, base)

    def sample_program(self, scene: Scene, rng, category: str):
        if category == "query_attribute":
            ref, target = self.refer(scene, rng, self._hops(rng))
            filters, _ = _filters_of(ref[1])
            free = [a for a in ATTR_ORDER if a not in filters]
            if not free:
                raise AmbiguityError("every attribute already named")
            return ["query", str(rng.choice(free)), ref]
        if category == "exist":
            return ["exist", self.some_set(scene, rng, self._hops(rng), from_object=rng.random() < 0.5)]
        if category == "count":
            r = rng.random()
            if r < 0.2:
                a = self.some_set(scene, rng, 0)
                b = self.some_set(scene, rng, 0)
                return ["count", ["or", a, b]]
            if r < 0.3:
                (x, _), (y, _) = self.refer(scene, rng, 0), self.refer(scene, rng, 0)
                d1, d2 = (str(d) for d in rng.choice(DIRECTIONS, size=2, replace=False))
                return ["count", ["and", ["relate", d1, x], ["relate", d2, y]]]
            return ["count", self.some_set(scene, rng, min(self._hops(rng), 1))]
        if category == "compare_numbers":
            op = "greater" if rng.random() < 0.5 else "less"
            a = self.some_set(scene, rng, int(rng.integers(2)))
            b = self.some_set(scene, rng, 0)
            return [op, ["count", a], ["count", b]]
        if category == "compare_attribute":
            (x, i), (y, j) = self.refer(scene, rng, self._hops(rng)), self.refer(scene, rng, int(rng.integers(2)))
            if i == j:
                raise AmbiguityError("comparison of an object with itself")
            return ["equal", str(rng.choice(ATTR_ORDER)), x, y]
        raise ValueError(f"unknown category {category!r}")

    def generate(self, scene: Scene, rng: np.random.Generator, category: str) -> QAInstance:
        for _ in range(self.max_retries):
            try:
                program = self.sample_program(scene, rng, category)
                check_program(program, self.max_depth)
                answer = execute_program(program, scene)
            except AmbiguityError:
                continue
            except ProgramError:
                continue
            tokens = render_question(program)
            if self.paraphrase_prob > 0:
                tokens = paraphrase(tokens, rng, self.paraphrase_prob)
            return QAInstance(scene, tokens, program, answer, category_of(program))
        raise GenerationError(f"no valid {category} question for this scene after {self.max_retries} tries")


def generate_question(scene: Scene, rng: np.random.Generator, template_family: str,
                      generator: QuestionGenerator | None = None) -> QAInstance:
    return (generator or QuestionGenerator()).generate(scene, rng, template_family)


@dataclass
class DatasetSpec:
    n: int
    grid_size: int = 5
    min_objects: int = 3
    max_objects: int = 8
    mix: dict = field(default_factory=lambda: {c: 1.0 for c in CATEGORIES})
    max_hops: int = 2
    paraphrase_prob: float = 0.0


def generate_dataset(spec: DatasetSpec, seed: int) -> list[QAInstance]:
    """Deterministic in ``(seed, index)``: each instance draws from its own stream."""
    cats = list(spec.mix)
    weights = np.array([spec.mix[c] for c in cats], dtype=float)
    counts = np.floor(weights / weights.sum() * spec.n).astype(int)
    for k in range(spec.n - counts.sum()):
        counts[k % len(cats)] += 1
    plan = [c for c, k in zip(cats, counts) for _ in range(k)]
    np.random.default_rng(seed).shuffle(plan)
    gen = QuestionGenerator(max_hops=spec.max_hops, paraphrase_prob=spec.paraphrase_prob)
    out = []
    for index, category in enumerate(plan):
        out.append(generate_instance(spec, gen, seed, index, category))
    return out


def generate_instance(spec: DatasetSpec, gen: QuestionGenerator, seed: int, index: int,
                      category: str) -> QAInstance:
    rng = np.random.default_rng([seed, index])
    for _ in range(100):
        n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        scene = generate_scene(rng, n_obj, spec.grid_size)
        try:
            return gen.generate(scene, rng, category)
        except GenerationError:
            continue
    raise GenerationError(f"instance {index}: could not generate a {category} question")


def category_histogram(instances: Sequence[QAInstance]) -> dict[str, int]:
    hist = {c: 0 for c in CATEGORIES}
    for inst in instances:
        hist[inst.category] += 1
    return hist
