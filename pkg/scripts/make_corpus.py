"""Regenerate the bundled text corpus (src/curlora/data/corpus.txt).

The corpus is a fixed, grammar-generated English shard. It is written by this
script alone and dedicated to the public domain (CC0), so the package carries
no third-party text. Output is deterministic for a given seed.

    python scripts/make_corpus.py --seed 1234 --size 200000
"""

import argparse
import random
from pathlib import Path

NAMES = ["Anna", "Tom", "the miller", "the old sailor", "a young clerk", "the farmer", "Mary", "the doctor",
         "the teacher", "my brother", "her aunt", "the captain", "John", "the baker", "a stranger", "Lucy"]
NOUNS = ["house", "river", "garden", "road", "letter", "horse", "window", "field", "table", "ship", "village",
         "forest", "bridge", "lamp", "book", "door", "hill", "church", "market", "boat", "fire", "winter",
         "morning", "evening", "storm", "bell", "kitchen", "basket", "wall", "mountain", "coat", "town"]
ADJS = ["old", "small", "quiet", "dark", "bright", "cold", "long", "green", "narrow", "heavy", "warm", "empty",
        "little", "great", "wet", "strange", "gentle", "broken", "white", "distant"]
VERBS_T = ["saw", "found", "carried", "opened", "closed", "watched", "painted", "mended", "sold", "bought",
           "followed", "left", "crossed", "remembered", "cleaned", "built", "lost", "kept", "wrote", "read"]
VERBS_I = ["walked", "waited", "slept", "laughed", "listened", "worked", "stayed", "returned", "sang",
           "spoke", "rested", "wandered", "hurried", "smiled", "paused"]
ADVS = ["slowly", "quietly", "early", "late", "again", "often", "suddenly", "carefully", "softly", "at last"]
PREPS = ["near", "by", "across", "behind", "beside", "under", "over", "beyond", "along", "inside"]
TIMES = ["In the morning", "At night", "After the storm", "Before supper", "On the next day", "In winter",
         "When the bell rang", "Later that evening", "Long ago", "That spring"]
SAYS = ["It is late", "The road is long", "We must go home", "The river is high", "I have lost my book",
        "The fire is warm", "Close the door", "The market opens early", "Look at the hill", "All is well"]


def noun_phrase(rng):
    n = rng.choice(NOUNS)
    if rng.random() < 0.5:
        n = f"{rng.choice(ADJS)} {n}"
    return f"the {n}"


def clause(rng):
    subj = rng.choice(NAMES)
    r = rng.random()
    if r < 0.45:
        s = f"{subj} {rng.choice(VERBS_T)} {noun_phrase(rng)}"
    elif r < 0.8:
        s = f"{subj} {rng.choice(VERBS_I)} {rng.choice(PREPS)} {noun_phrase(rng)}"
    else:
        s = f"{subj} {rng.choice(VERBS_I)} {rng.choice(ADVS)}"
    if rng.random() < 0.3:
        s += f" {rng.choice(PREPS)} {noun_phrase(rng)}"
    return s


def sentence(rng):
    r = rng.random()
    if r < 0.15:
        s = f"{rng.choice(TIMES)}, {clause(rng)}"
    elif r < 0.3:
        s = f"{clause(rng)}, and {clause(rng)}"
    elif r < 0.4:
        s = f"{clause(rng)} because {clause(rng)}"
    elif r < 0.5:
        return f'"{rng.choice(SAYS)}," said {rng.choice(NAMES)}.'
    else:
        s = clause(rng)
    return s[0].upper() + s[1:] + "."


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=1234)
    ap.add_argument("--size", type=int, default=200_000)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "src/curlora/data/corpus.txt")
    args = ap.parse_args()
    rng = random.Random(args.seed)
    parts, size = [], 0
    while size < args.size:
        para = " ".join(sentence(rng) for _ in range(rng.randint(3, 7))) + "\n\n"
        parts.append(para)
        size += len(para)
    args.out.write_text("".join(parts), encoding="ascii")
    print(f"wrote {size} bytes to {args.out}")


if __name__ == "__main__":
    main()
