"""Regenerate src/atlaskv/data/sample_triples.jsonl (500 triples, seed 7)."""
import json
import random
from pathlib import Path

NAMED = [
    "John", "StockLemon.com", "Elara Moonshadow", "Thorne Blackwood", "Zara Nightingale",
    "MOROCCO", "Ramble On", "Hensley", "Acme Robotics", "Northwind Traders", "Lyra Starfire",
    "Kaelith Silverwind", "Jaxon Wildheart", "the Royal Society", "Lake Baikal", "Oslo",
    "Marie Curie", "Bell Labs", "the Danube", "Mount Kenya", "Ada Lovelace", "Kyoto University",
    "Pine Ridge Hospital", "the Orion Project", "Dick the Mockingbird", "Nadia Petrova",
]
EVENTS = [
    "John has made profits", "John founded StockLemon.com", "the factory doubled its output",
    "the river flooded the valley", "the committee approved the budget", "a new vaccine was tested",
    "the team won the regional final", "prices rose sharply in spring", "the bridge was reopened",
    "the company moved its headquarters", "researchers published the dataset",
    "the mayor announced new elections", "the orchestra toured Europe", "the drought ended",
    "volunteers planted ten thousand trees", "the startup raised a second round",
]
CONCEPTS = [
    "synthetic biology", "renewable energy", "marine biodiversity", "machine translation",
    "urban planning", "public health", "supply chains", "quantum error correction",
    "folk music", "coral reef conservation", "literacy", "data privacy",
]
EVENT_RELATIONS = ["because", "causes", "results in", "leads to", "before", "after", "at the same time"]
OTHER_RELATIONS = [
    "produces", "is participated by", "participates in", "governs", "achieves", "founded", "owns",
    "is located in", "works for", "employs", "is a member of", "is part of", "contains", "wrote",
    "created", "invented", "discovered", "is married to", "was born in", "studied at", "teaches",
    "leads", "supports", "opposes", "precedes", "requires", "uses", "consider", "is ranked", "is a",
    "explains", "threatens", "publishes", "is described as", "aims to",
]
POOLS = {"named": NAMED, "event": EVENTS, "concept": CONCEPTS}


def main():
    rng = random.Random(7)
    rows = []
    while len(rows) < 500:
        if rng.random() < 0.3:
            rel = rng.choice(EVENT_RELATIONS)
            hk, tk = "event", "event"
        else:
            rel = rng.choice(OTHER_RELATIONS)
            hk = rng.choice(["named", "named", "event"])
            tk = rng.choice(["named", "event", "concept"])
        head, tail = rng.choice(POOLS[hk]), rng.choice(POOLS[tk])
        if head == tail or head in tail or tail in head:
            continue
        rows.append({"id": f"t{len(rows):04d}", "head": head, "relation": rel, "tail": tail,
                     "head_kind": hk, "tail_kind": tk})
    out = Path(__file__).resolve().parents[1] / "src" / "atlaskv" / "data" / "sample_triples.jsonl"
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main()
