"""Walk through the corpus tooling: tokenize, mine complex mappings, and
build the one-to-many dataset.

Run with:  python3 demos/01_corpus_mappings.py
"""

from segcvae import build_cdm_dataset, mine_cdm, tokenize
from segcvae.corpus import DialoguePair, pairs_from_corpus, read_corpus

RAW = """\
Move! What have you done?
Nothing, I swear.

Move! What have you done?
Relax! where does it hurt?

Move! What have you done?
Stop! ma'am, ma'am!

I'd rather die than live with you!
Relax! where does it hurt?

See you tomorrow.
Good night.
"""

# the block format: one utterance per line, blank line between dialogues
dialogues = read_corpus(RAW.splitlines())
print(f"{len(dialogues)} dialogues, tokenized like:")
print("   ", tokenize("Move! What have you done?"))

pairs = pairs_from_corpus(dialogues)
print(f"\n{len(pairs)} adjacent-turn pairs extracted")

# one context appears with three distinct responses (one-to-many), and one
# response answers two distinct contexts (many-to-one)
report = mine_cdm(pairs)
print("\nmapping report:")
print(report.text())

splits, manifest = build_cdm_dataset(pairs, "o2m")
print("one-to-many dataset manifest:", manifest)
for name, split in splits.items():
    for pair in split:
        print(f"  [{name}] {' '.join(pair.context)}  ->  {' '.join(pair.response)}")
