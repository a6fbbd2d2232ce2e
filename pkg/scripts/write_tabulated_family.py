"""Sample a built-in family on a (t, alpha) grid and write it in the tabulated format.

The output can be used as ``{"name": "tabulated", "params": {"path": ...}}`` in a config.
"""
import argparse
import json

from adiapump import cli, model


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("family", choices=sorted(set(cli.FAMILIES) - {"tabulated"}))
    p.add_argument("path")
    p.add_argument("--params", default="{}", help="family parameters as JSON")
    p.add_argument("--n-t", type=int, default=65)
    p.add_argument("--n-alpha", type=int, default=17)
    args = p.parse_args(argv)
    bundle = cli.build_family({"name": args.family, "params": json.loads(args.params)})
    model.write_tabulated(args.path, bundle.family, args.n_t, args.n_alpha)
    sel = bundle.selection
    print(f"wrote {args.path}; selection e_ref={sel.e_ref} k={sel.k}")


if __name__ == "__main__":
    main()
