"""
Tiny seeded property-check harness.

A generator is a function of a numpy Generator returning one case. `check` draws
case k from `rng.child(k)`, so every counter-example can be replayed by index.
"""
import traceback
from typing import Any, Callable, List, Sequence, TypeVar

import numpy as np

from ..core.rng import RngStream

T = TypeVar("T")
Gen = Callable[[np.random.Generator], T]

gen_target = 100
examples = 5


def lift(value: T) -> Gen[T]:
    return lambda g: value


def gen_range(start: int, stop: int) -> Gen[int]:
    """Integer in [start, stop], both ends included."""
    return lambda g: int(g.integers(start, stop + 1))


def gen_uniform(low: float, high: float) -> Gen[float]:
    return lambda g: float(g.uniform(low, high))


def gen_array(shape: Sequence[int], low: float, high: float) -> Gen[np.ndarray]:
    return lambda g: g.uniform(low, high, size=tuple(shape))


def gen_normal(shape: Sequence[int]) -> Gen[np.ndarray]:
    return lambda g: g.standard_normal(size=tuple(shape))


def gen_tuple(*generators: Gen[Any]) -> Gen[tuple]:
    return lambda g: tuple(gen(g) for gen in generators)


def gen_bind(generator: Gen[Any], build: Callable[[Any], Gen[T]]) -> Gen[T]:
    """Draw a value, then draw from the generator that depends on it."""
    return lambda g: build(generator(g))(g)


def check(
    predicate: Callable[[T], bool], generator: Gen[T], rng: RngStream, count: int = gen_target
) -> List[str]:
    counter_examples = []
    for k in range(count):
        case = generator(rng.child(k).generator())
        try:
            if not predicate(case):
                counter_examples.append(f"#{k}: {case!r}")
        except Exception:
            counter_examples.append(f"#{k}: {case!r} : {traceback.format_exc()}")
    return counter_examples


def check_or_fail(
    predicate: Callable[[T], bool], generator: Gen[T], rng: RngStream, count: int = gen_target
) -> None:
    counter_examples = check(predicate, generator, rng, count)
    if counter_examples:
        failures = len(counter_examples)
        message = "\n".join(f"    -> {c}" for c in counter_examples[:examples])
        raise AssertionError(
            f"found {failures} counter examples, displaying first {min(failures, examples)}:\n{message}"
        )
