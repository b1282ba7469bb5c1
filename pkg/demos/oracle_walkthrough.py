"""Walk one logical form through template extraction, the oracle and the
transition system, printing the stack after every action.

    python3 demos/oracle_walkthrough.py ["(lambda $0 e ...)"]
"""
import sys

from protoparse.lf import extract_template, fill_template, parse_lf, serialize_lf
from protoparse.transition import ParserState, apply_action, oracle_actions

DEFAULT = "(lambda $0 e (and (flight $0) (from $0 boston:ci) (to $0 denver:ci)))"


def main(text: str = DEFAULT) -> None:
    lf = parse_lf(text)
    template, slots = extract_template(lf)
    print("logical form :", serialize_lf(lf))
    print("template     :", template)
    print("entities     :", list(slots.entity_values))
    print("variables    :", list(slots.variable_values))
    print()
    state = ParserState()
    for i, action in enumerate(oracle_actions(template.tree)):
        state = apply_action(state, action)
        stack = " | ".join(serialize_lf(t) for t in state.stack)
        print(f"{i:2d} {str(action):40s} stack: {stack}")
    assert state.stack == (template.tree,)
    assert fill_template(template, slots) == lf
    print("\nrebuilt template and refilled LF match the input")


if __name__ == "__main__":
    main(*sys.argv[1:2])
