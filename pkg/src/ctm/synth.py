"""Synthetic product-title corpus with a test-only (novel) entity reserve.

Titles are assembled from templates over brand, product and feature
lexicons. Brands mix plausible names with "self-made" pseudo-words built
from random syllables. A ``reserve_fraction`` of the brand, product and
feature lexicons is held out of training entirely; every non-reserved entity in
the test split is drawn from entities already emitted in training, so the
novel-entity set is exactly the reserved-lexicon test examples.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ctm.data import CLASSES, Example
from ctm.errors import ConfigError
from ctm.rng import Rng

NAMED_BRANDS = [
    "Nike", "Nagano", "Zebra", "Ingco", "Hugo Boss", "Maison Louis Marie", "Cheeks Ahoy",
    "Adidas", "Sony", "Philips", "Bosch", "Makita", "Lego", "Canon", "Puma", "Reebok",
    "Logitech", "Anker", "Oral B", "Braun", "Casio", "Seiko", "Levis", "Nautica",
    "Crayola", "Sharpie", "Pilot", "Tefal", "Ikea", "Dyson", "Garmin", "Fossil",
    "Coleman", "Yeti", "Stanley", "Lodge", "Oxo", "Pyrex", "Sanrio", "Vans",
    "Converse", "Asics", "Mizuno", "Wilson", "Spalding", "Herschel", "Osprey", "Kipling",
    "Clarks", "Crocs", "Timex", "Skagen", "Bodum", "Hario", "Melitta", "Zojirushi",
]
SYLLABLES = [
    "fa", "shern", "ga", "zui", "mo", "ki", "lu", "vex", "tor", "ra", "ni", "zo", "pek",
    "qua", "bri", "yo", "dax", "fen", "lio", "ty", "mar", "ko", "zen", "vi", "ul", "ob",
    "ix", "sa", "rum", "pha", "jo", "wen", "cy", "tu", "lek", "dra", "mi", "gu", "hal",
]
PRODUCTS = [
    "Chairs", "Hoodie", "Towels", "Gel Pen", "Perfume Oil", "EDT", "Watch Band", "Backpack",
    "Sneakers", "Jacket", "T-Shirt", "Socks", "Mug", "Water Bottle", "Lamp", "Desk",
    "Headphones", "Speaker", "Keyboard", "Mouse", "Charger", "Cable", "Phone Case",
    "Notebook", "Pencils", "Markers", "Scissors", "Drill", "Screwdriver Set", "Hammer",
    "Wrench", "Tent", "Sleeping Bag", "Cooler", "Thermos", "Skillet", "Saucepan", "Kettle",
    "Toaster", "Blender", "Coffee Maker", "Grinder", "Teapot", "Cutting Board", "Knife",
    "Spatula", "Sunglasses", "Wallet", "Belt", "Scarf", "Gloves", "Beanie", "Cap",
    "Sandals", "Boots", "Slippers", "Pillow", "Blanket", "Rug", "Curtains", "Candle",
    "Vase", "Mirror", "Clock", "Shampoo", "Conditioner", "Soap", "Lotion", "Toothbrush",
    "Razor", "Hair Dryer", "Comb", "Basketball", "Tennis Racket", "Yoga Mat", "Dumbbells",
    "Jump Rope", "Puzzle", "Building Blocks", "Doll", "Kite", "Umbrella", "Suitcase",
    "Tote Bag", "Bean Snack", "Green Tea", "Cookies", "Chocolate Bar",
]
COLORS = ["Black", "White", "Red", "Dark Blue", "Green", "Grey", "Pink", "Navy", "Beige",
          "Purple", "Yellow", "Silver", "Gold", "Brown", "Orange", "Teal"]
AUDIENCES = ["Mens", "Womens", "Kids", "Unisex", "for Men", "for Women", "for Kids", "Baby"]
MATERIALS = ["100% Cotton", "Stainless Steel", "Leather", "Bamboo", "Ceramic", "Wool",
             "Silicone", "Glass", "Aluminum", "Polyester", "Cast Iron", "Organic"]
STYLES = ["Sportswear", "Waterproof", "Portable", "Wireless", "Retractable", "Vintage",
          "Lightweight", "Rechargeable", "Foldable", "Trendy", "Classic", "Slim Fit"]
UNITS = ["Oz", "ml", "g", "mm", "cm", "Pcs", "Inch", "L", "kg", "W"]
SIZES = ["XS", "S", "M", "L", "XL", "XXL", "Medium", "Large", "Small"]

# slot names: B brand, P product, F/G features, M model name (unlabeled)
TEMPLATES = [
    "B F P",
    "B P - F",
    "B F G P",
    "F P - B",
    "B P | F | G",
    "B F M P",
    "B F G M P",
    "B M P F",
    "G F P by B",
    "B P , F",
    "Set of N P - B F",
]


def _feature_pool(rng: Rng) -> list[str]:
    pool = set(COLORS) | set(AUDIENCES) | set(MATERIALS) | set(STYLES) | set(SIZES)
    for unit in UNITS:
        for _ in range(8):
            num = int(rng.integers(1, 500))
            if rng.random() < 0.3:
                pool.add(f"{num / 10:.1f} {unit}")
            else:
                pool.add(f"{num}{unit}" if rng.random() < 0.4 else f"{num} {unit}")
    for k in (2, 3, 4, 6, 10, 12):
        pool.add(f"Pack of {k}")
    return sorted(pool)


def _made_up_word(rng: Rng, lo: int = 2, hi: int = 3) -> str:
    parts = [SYLLABLES[int(rng.integers(0, len(SYLLABLES)))] for _ in range(int(rng.integers(lo, hi + 1)))]
    word = "".join(parts)
    if rng.random() < 0.3:
        # camel-case pseudo-words like GaGaZui
        cut = len(parts[0])
        word = word[:cut].capitalize() + word[cut:].capitalize()
    else:
        word = word.capitalize()
    if rng.random() < 0.15:
        word = word.upper()
    return word


@dataclass
class GenSpec:
    train_counts: tuple[int, int, int] = (797, 700, 827)
    test_counts: tuple[int, int, int] = (360, 437, 520)
    n_self_made_brands: int = 80
    reserve_fraction: float = 0.3
    novel_rate: float = 0.45
    n_model_names: int = 40

    def validate(self) -> None:
        if not 0.0 <= self.reserve_fraction < 1.0:
            raise ConfigError(f"reserve_fraction must lie in [0, 1), got {self.reserve_fraction}")
        if not 0.0 <= self.novel_rate <= 1.0:
            raise ConfigError(f"novel_rate must lie in [0, 1], got {self.novel_rate}")
        counts = list(self.train_counts) + list(self.test_counts)
        if any(c < 0 for c in counts):
            raise ConfigError("example counts must be non-negative")
        if sum(self.train_counts) == 0 or sum(self.test_counts) == 0:
            raise ConfigError("both splits need at least one example")


@dataclass
class Manifest:
    spec: dict
    seed: int
    brands: list[str]
    products: list[str]
    features: list[str]
    model_names: list[str]
    self_made_brands: list[str]
    reserved_brands: list[str]
    reserved_products: list[str]
    reserved_features: list[str] = field(default_factory=list)
    train_counts: dict[str, int] = field(default_factory=dict)
    test_counts: dict[str, int] = field(default_factory=dict)
    novel_test_examples: int = 0

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _pick(rng: Rng, items):
    return items[int(rng.integers(0, len(items)))]


def _render(template: str, slots: dict[str, str]) -> tuple[str, dict[str, list[str]]]:
    words, spans = [], {"brand": [], "product": [], "feature": []}
    for tok in template.split():
        if tok == "B":
            words.append(slots["B"]); spans["brand"].append(slots["B"])
        elif tok == "P":
            words.append(slots["P"]); spans["product"].append(slots["P"])
        elif tok in ("F", "G"):
            words.append(slots[tok]); spans["feature"].append(slots[tok])
        elif tok == "M":
            words.append(slots["M"])
        elif tok == "N":
            words.append(slots["N"])
        else:
            words.append(tok)
    return " ".join(words), spans


def generate_synthetic_corpus(spec: GenSpec, rng: Rng) -> tuple[list[Example], list[Example], Manifest]:
    spec.validate()
    lex_rng = rng.split("lexicon")
    self_made: list[str] = []
    taken = {b.casefold() for b in NAMED_BRANDS}
    while len(self_made) < spec.n_self_made_brands:
        w = _made_up_word(lex_rng)
        if w.casefold() not in taken:
            taken.add(w.casefold())
            self_made.append(w)
    brands = NAMED_BRANDS + self_made
    products = list(PRODUCTS)
    features = _feature_pool(lex_rng)
    model_names = []
    while len(model_names) < spec.n_model_names:
        w = _made_up_word(lex_rng, 2, 2)
        if w.casefold() not in taken:
            taken.add(w.casefold())
            model_names.append(w)

    def reserve(items: list[str], key: str) -> tuple[list[str], list[str]]:
        k = int(round(spec.reserve_fraction * len(items)))
        order = rng.split(key).permutation(len(items))
        held = sorted(items[i] for i in order[:k])
        return [x for x in items if x not in set(held)], held

    open_brands, held_brands = reserve(brands, "reserve-brand")
    open_products, held_products = reserve(products, "reserve-product")
    open_features, held_features = reserve(features, "reserve-feature")
    if not open_brands or not open_products or not open_features:
        raise ConfigError("reserve_fraction leaves no brands, products or features for training")
    capacity = len(TEMPLATES) * len(open_brands) * len(open_products) * len(open_features)
    if sum(spec.train_counts) > capacity:
        raise ConfigError(f"{sum(spec.train_counts)} train examples exceed template capacity {capacity}")

    def fill(r: Rng, brand_pool, product_pool, feature_pool, fixed: dict[str, str]) -> tuple[str, dict]:
        template = _pick(r, TEMPLATES)
        f = fixed.get("F") or _pick(r, feature_pool)
        g = _pick(r, feature_pool)
        while g == f:
            g = _pick(r, feature_pool)
        slots = {
            "B": fixed.get("B") or _pick(r, brand_pool),
            "P": fixed.get("P") or _pick(r, product_pool),
            "F": f, "G": g,
            "M": _pick(r, model_names),
            "N": str(int(r.integers(2, 13))),
        }
        return _render(template, slots)

    def schedule(counts, r: Rng) -> list[str]:
        seq = [c for c, k in zip(CLASSES, counts) for _ in range(k)]
        return [seq[i] for i in r.permutation(len(seq))]

    train_rng = rng.split("train")
    train: list[Example] = []
    for cls in schedule(spec.train_counts, train_rng):
        title, spans = fill(train_rng, open_brands, open_products, open_features, {})
        train.append(Example(title, _pick(train_rng, spans[cls]), cls))

    seen = {c: sorted({ex.entity for ex in train if ex.gold == c}) for c in CLASSES}
    test_rng = rng.split("test")
    test: list[Example] = []
    novel = 0
    for cls in schedule(spec.test_counts, test_rng):
        fixed: dict[str, str] = {}
        held = {"brand": held_brands, "product": held_products, "feature": held_features}[cls]
        is_novel = bool(held) and test_rng.random() < spec.novel_rate
        pool = held if is_novel else seen[cls]
        if not pool:
            raise ConfigError(f"no {cls} entities available for the test split")
        fixed[{"brand": "B", "product": "P", "feature": "F"}[cls]] = _pick(test_rng, pool)
        title, spans = fill(test_rng, brands, products, seen["feature"] or open_features, fixed)
        entity = fixed.get("B") or fixed.get("P") or fixed["F"]
        assert entity in spans[cls]
        test.append(Example(title, entity, cls))
        novel += is_novel

    manifest = Manifest(
        spec=asdict(spec), seed=rng.seed, brands=brands, products=products, features=features,
        model_names=model_names, self_made_brands=self_made,
        reserved_brands=held_brands, reserved_products=held_products, reserved_features=held_features,
        train_counts={c: k for c, k in zip(CLASSES, spec.train_counts)},
        test_counts={c: k for c, k in zip(CLASSES, spec.test_counts)},
        novel_test_examples=novel,
    )
    return train, test, manifest


def made_up_brand_subset(examples: list[Example], manifest: Manifest) -> list[Example]:
    """Examples whose title contains one of the generated pseudo-word brands."""
    made_up = {b.casefold() for b in manifest.self_made_brands}
    return [ex for ex in examples if any(w.casefold() in made_up for w in ex.title.split())]
