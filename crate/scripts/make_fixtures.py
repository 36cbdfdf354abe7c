#!/usr/bin/env python3
"""Regenerate the synthetic Somali-like fixtures under fixtures/.

The output is deterministic; rerunning rewrites identical files.
"""

import csv
import json
import random
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent / "fixtures"

SUBJECTS = [
    "dowladda", "wasiirka", "madaxweynaha", "ardayda", "dadka", "hooyada", "ciyaartoyda",
    "ganacsatada", "beeralayda", "macallinka", "xildhibaanada", "shirkadda", "guddoomiyaha",
    "ciidamada", "dhakhtarka", "wariyaha", "guddiga", "bulshada", "haweenka", "odayaasha",
]
VERBS = [
    "ayaa shaaciyay", "ayaa ka hadlay", "ayaa soo dhaweeyay", "ayaa diiday", "ayaa dhisay",
    "ayaa furay", "ayaa booqday", "ayaa taageeray", "ayaa ku dhawaaqay", "ayaa qaaday",
    "ayaa sameeyay", "ayaa dalbaday", "ayaa ansixiyay", "ayaa dib u dhigay",
]
OBJECTS = [
    "mashruuc cusub", "heshiis ganacsi", "dugsi sare", "isbitaal weyn", "waddo dheer",
    "barnaamij waxbarasho", "doorashada", "miisaaniyadda", "suuqa xoolaha", "kulanka kubadda cagta",
    "shirka nabadda", "biyaha nadiifka ah", "korontada", "dekedda", "shaqo la'aanta",
    "gargaarka abaarta", "xarunta caafimaadka", "garoonka diyaaradaha",
]
PLACES = [
    "Muqdisho", "Hargeysa", "Kismaayo", "Garoowe", "Baydhabo", "Beledweyne", "Boosaaso",
    "Gaalkacyo", "Jowhar", "Berbera", "Burco", "Dhuusamareeb",
]
TIMES = ["shalay", "maanta", "toddobaadkan", "bishii hore", "sanadkan", "habeen hore", "subaxnimadii"]
ADVERBS = ["si rasmi ah", "si degdeg ah", "kadib kulan dheer", "markii ugu horreysay", "iyadoo la joogo xilli adag"]
QUOTES = [
    "Waxaan rajeynaynaa in dadka ay ka faa'iideystaan", "Arrintan waa mid muhiim ah",
    "Waxaan u baahanahay taageero dheeraad ah", "Howshu waxay socon doontaa bilaha soo socda",
]


def sentence(rng):
    form = rng.randrange(5)
    s, v, o = rng.choice(SUBJECTS), rng.choice(VERBS), rng.choice(OBJECTS)
    p, t, a = rng.choice(PLACES), rng.choice(TIMES), rng.choice(ADVERBS)
    if form == 0:
        text = f"{s} {p} {v} {o} {t}."
    elif form == 1:
        text = f"{t.capitalize()}, {s} ku sugan {p} {v} {o} {a}."
    elif form == 2:
        text = f"{s} {v} {o} {a}, sida ay sheegeen wararka {p}."
    elif form == 3:
        text = f"{rng.choice(QUOTES)}, ayuu yiri {s} {p}."
    else:
        n = rng.randrange(2, 900)
        text = f"{n} qof oo ka mid ah {s} {p} {v} {o} {t}!"
    return text[0].upper() + text[1:]


def paragraph(rng, n):
    return " ".join(sentence(rng) for _ in range(n))


NOISE = ["★", "@", "#", "…", "→", "|"]


def noisy(rng, text):
    words = text.split(" ")
    i = rng.randrange(len(words))
    words[i] = words[i] + rng.choice(NOISE)
    return " ".join(words)


def write_jsonl(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")


def corpus(rng):
    out = ROOT / "corpus"
    out.mkdir(parents=True, exist_ok=True)
    news = []
    for i in range(140):
        text = paragraph(rng, rng.randrange(4, 7))
        if i % 7 == 0:
            text = noisy(rng, text)
        news.append({"id": f"n{i:03}", "title": f"Warka {i}", "text": text, "url": f"https://wararka.example/{i}"})
    # Exact repeats of earlier stories, as crawls produce.
    news += [dict(news[i], id=f"n{i:03}-repost") for i in (3, 17, 42)]
    write_jsonl(out / "news.jsonl", news)

    blocks = [paragraph(rng, rng.randrange(3, 6)) for _ in range(70)]
    blocks += [blocks[5].upper(), blocks[11]]  # case-only and exact duplicates
    with open(out / "web.txt", "w", encoding="utf-8") as f:
        f.write("\n\n".join(blocks) + "\n")

    with open(out / "wiki.csv", "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "title", "text"])
        for i in range(60):
            w.writerow([f"w{i:02}", f"Maqaal {i}", paragraph(rng, rng.randrange(4, 7))])


def pretrain(rng):
    # A small, highly regular corpus: few subjects/objects, fixed frames.
    subj = SUBJECTS[:6]
    obj = OBJECTS[:6]
    lines = []
    seen = set()
    while len(lines) < 50:
        s, v, o, p, t = rng.choice(subj), rng.choice(VERBS[:5]), rng.choice(obj), rng.choice(PLACES[:5]), rng.choice(TIMES[:4])
        line = f"{s} {p} {v} {o} {t}."
        if line not in seen:
            seen.add(line)
            lines.append(line[0].upper() + line[1:])
    with open(ROOT / "pretrain.txt", "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def separable(rng):
    rows = []
    for i in range(32):
        good = i % 2 == 0
        cue = "aad u wanaagsan" if good else "aad u xun"
        rows.append({
            "id": f"s{i:02}",
            "text": f"{rng.choice(SUBJECTS).capitalize()} {rng.choice(PLACES)} xaaladdu waa {cue} {rng.choice(TIMES)}.",
            "label": "wanaagsan" if good else "xun",
        })
    write_jsonl(ROOT / "tasks" / "separable.jsonl", rows)


FAKE_CUES = ["DEG DEG", "war la yaab leh", "qarsoodi ah oo la helay", "lama rumaysan karo", "sir culus"]
REAL_CUES = ["sida ay xaqiijisay wakaaladda", "warbixin rasmi ah", "shir jaraa'id", "sida lagu sheegay bayaanka"]


def fakenews(rng):
    rows = []
    for i in range(120):
        fake = rng.random() < 0.5
        cue = rng.choice(FAKE_CUES if fake else REAL_CUES)
        body = sentence(rng)
        text = f"{cue.capitalize()}: {body}" if fake else f"{body[:-1]}, {cue}."
        rows.append({"id": f"f{i:03}", "text": text, "label": "fake" if fake else "real"})
    write_jsonl(ROOT / "tasks" / "fakenews.jsonl", rows)


TOPICS = {
    "business": ["suuqa", "ganacsi", "lacagta", "canshuurta"],
    "entertainment": ["heesta", "filimka", "fanaanka", "riwaayadda"],
    "health": ["isbitaalka", "cudurka", "tallaalka", "dhakhtarka"],
    "politics": ["doorashada", "baarlamaanka", "xildhibaan", "madaxweyne"],
    "religion": ["masjidka", "culimada", "soonka", "xajka"],
    "sports": ["kubadda", "ciyaaryahan", "tartanka", "orodka"],
    "technology": ["internetka", "taleefanka", "kombuyuutarka", "barnaamijka"],
}


def topics(rng):
    rows = []
    names = list(TOPICS)
    for i in range(140):
        t = names[i % len(names)]
        words = rng.sample(TOPICS[t], 2)
        text = f"{rng.choice(PLACES)}: warka {words[0]} iyo {words[1]} {rng.choice(TIMES)} {rng.choice(ADVERBS)}."
        rows.append({"id": f"t{i:03}", "text": text, "label": t})
    write_jsonl(ROOT / "tasks" / "topic.jsonl", rows)


TOX_CUES = {
    "abuse": "waad xun tahay",
    "obscene": "hadal fool xun",
    "insult": "doqon yahow",
    "identity-hate": "qabiilkaaga oo dhan",
    "severe-toxic": "si aad ah u nacas",
    "threat": "waan ku weerari doonaa",
}


def toxicity(rng):
    rows = []
    cats = list(TOX_CUES)
    for i in range(160):
        if i % 2 == 0:
            text = f"{sentence(rng)[:-1]}, mahadsanid."
            labels = []
        else:
            k = 1 if rng.random() < 0.6 else 2
            labels = sorted(rng.sample(cats, k), key=cats.index)
            text = f"{rng.choice(SUBJECTS).capitalize()}, " + " ".join(TOX_CUES[c] for c in labels) + "."
        rows.append({"id": f"x{i:03}", "text": text, "labels": labels})
    write_jsonl(ROOT / "tasks" / "toxicity.jsonl", rows)
    # Stage-1 view of the same comments: any category makes a comment toxic.
    binary = [{"id": r["id"], "text": r["text"], "label": "toxic" if r["labels"] else "non-toxic"} for r in rows]
    write_jsonl(ROOT / "tasks" / "toxicity_binary.jsonl", binary)


def annotation(rng):
    items = []
    for i in range(6):
        items.append({"id": f"a{i:02}", "text": sentence(rng), "task": "fakenews", "source": rng.choice(["bbc-somali", "jowhar", "channel-c"])})
    for i in range(6, 12):
        items.append({"id": f"a{i:02}", "text": f"{rng.choice(SUBJECTS).capitalize()}, {rng.choice(list(TOX_CUES.values()))}.", "task": "toxicity", "source": "constitution-debate"})
    write_jsonl(ROOT / "annotation" / "items.jsonl", items)
    # Scripted labels for annotators "amina" and "bashir" (7 of 12 agree on stage 1).
    script = [
        ("a00", "fake", [], "fake", []),
        ("a01", "real", [], "real", []),
        ("a02", "fake", [], "real", []),
        ("a03", "real", [], "real", []),
        ("a04", "fake", [], "fake", []),
        ("a05", "real", [], "fake", []),
        ("a06", "toxic", ["insult", "abuse"], "toxic", ["insult"]),
        ("a07", "non-toxic", [], "non-toxic", []),
        ("a08", "toxic", ["threat"], "non-toxic", []),
        ("a09", "toxic", ["obscene"], "toxic", ["identity-hate"]),
        ("a10", "non-toxic", [], "toxic", ["abuse"]),
        ("a11", "toxic", ["abuse"], "non-toxic", []),
    ]
    rows = []
    for item, s1a, s2a, s1b, s2b in script:
        rows.append({"item_id": item, "annotator_id": "amina", "stage1": s1a, "stage2": s2a})
        rows.append({"item_id": item, "annotator_id": "bashir", "stage1": s1b, "stage2": s2b})
    write_jsonl(ROOT / "annotation" / "labels.jsonl", rows)


def main():
    rng = random.Random(20241)
    corpus(rng)
    pretrain(rng)
    separable(rng)
    fakenews(rng)
    topics(rng)
    toxicity(rng)
    annotation(rng)


if __name__ == "__main__":
    main()
