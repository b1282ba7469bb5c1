"""Mine idioms from the synthetic flight corpus and show how much shorter
the oracle action sequences become.

    python3 demos/idiom_normalization.py [min_support]

Every synthetic template occurs four times, so thresholds of 4 or less
collapse each whole template into one idiom; the default of 5 keeps the
shared scaffolding only.
"""
import sys

from protoparse.data import parse_dataset
from protoparse.idioms import expand_idioms, mean_action_count, normalize_templates
from protoparse.lf import serialize_lf
from protoparse.synthetic import grammar_tsv
from protoparse.transition import oracle_actions


def main(min_support: int = 5) -> None:
    templates = [e.template.tree for e in parse_dataset(grammar_tsv(0))]
    out, inv = normalize_templates(templates, min_support)
    print(f"{len(templates)} templates, {len(inv)} idioms at min_support={min_support}")
    for idiom in inv.idioms:
        print(f"  {idiom.symbol:5s} support {idiom.support:3d}  {idiom.key}")
    print(f"mean actions {mean_action_count(templates):.2f} -> {mean_action_count(out):.2f}")
    print("\nexample:", serialize_lf(templates[0]))
    print("  before:", " ".join(str(a) for a in oracle_actions(templates[0])))
    print("  after :", " ".join(str(a) for a in oracle_actions(out[0])))
    assert expand_idioms(out, inv) == templates


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:2]))
