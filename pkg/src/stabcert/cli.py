"""Command line interface: mesh generation, certification and oracle runs.

Exit codes: 0 when a certificate with verdict "certified" was produced,
2 when the pipeline ran but could not certify (gamma_h <= 0 or a failing
Gårding check), 1 on any error.
"""

from __future__ import annotations

import argparse
import os
import sys


def _parse_mesh_source(text):
    """Either a file path or ``square:n[:neumann-bottom]``."""
    if text.startswith("square:"):
        parts = text.split(":")
        if len(parts) not in (2, 3) or (len(parts) == 3
                                        and parts[2] != "neumann-bottom"):
            raise ValueError(f"bad mesh spec '{text}' (use square:n"
                             "[:neumann-bottom])")
        return ("square", int(parts[1]), len(parts) == 3)
    return ("file", text, False)


def _load_mesh_arg(text):
    from . import mesh as msh

    kind, value, neumann = _parse_mesh_source(text)
    if kind == "square":
        return msh.generate_unit_square(value, dirichlet_only=not neumann)
    return msh.load_mesh(value)


def _add_common(sub):
    sub.add_argument("--mesh", required=True,
                     help="mesh file path or square:n[:neumann-bottom]")
    sub.add_argument("--config", required=True, help="problem config file")
    sub.add_argument("--out", required=True, help="output JSON path")
    sub.add_argument("--diagnostics", action="store_true",
                     help="attach efficiency diagnostics to the certificate")
    sub.add_argument("--refinements", type=int, default=2,
                     help="uniform refinements for the reference oracle")
    sub.add_argument("--threads", type=int, default=1,
                     help="BLAS worker thread cap")
    sub.add_argument("--safety", type=float, default=1.0 + 1e-6,
                     help="multiplicative safety factor on eigenvalue estimates")
    sub.add_argument("--tol", type=float, default=1e-10,
                     help="linear solver relative residual tolerance")


def make_parser():
    parser = argparse.ArgumentParser(
        prog="stabcert",
        description="Guaranteed inf-sup stability certificates for 2D "
                    "second-order FEM problems")
    subs = parser.add_subparsers(dest="command", required=True)

    cert = subs.add_parser("certify", help="compute a stability certificate")
    _add_common(cert)

    orac = subs.add_parser("oracle",
                           help="reference inf-sup and efficiency diagnostics")
    _add_common(orac)

    gen = subs.add_parser("meshgen", help="write a structured unit-square mesh")
    gen.add_argument("--n", type=int, required=True,
                     help="subdivisions per side (2*n^2 elements)")
    gen.add_argument("--out", required=True, help="mesh file path")
    gen.add_argument("--neumann-bottom", action="store_true",
                     help="tag the bottom edge Neumann instead of Dirichlet")
    return parser


def cmd_certify(args):
    from .certify import efficiency_diagnostics, run_certification
    from .problem import load_config

    mesh = _load_mesh_arg(args.mesh)
    spec = load_config(args.config)
    run = run_certification(mesh, spec, safety=args.safety,
                            solver_tol=args.tol)
    cert = run.certificate
    if args.diagnostics:
        diag = efficiency_diagnostics(run, refinements=args.refinements)
        cert.diagnostics = diag.to_dict()
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(cert.to_json())
    print(f"gamma_h = {cert.gamma_h:.6g}  verdict = {cert.verdict}")
    return 0 if cert.verdict == "certified" else 2


def cmd_oracle(args):
    from .certify import efficiency_diagnostics, run_certification
    from .problem import load_config

    mesh = _load_mesh_arg(args.mesh)
    spec = load_config(args.config)
    run = run_certification(mesh, spec, safety=args.safety,
                            solver_tol=args.tol)
    diag = efficiency_diagnostics(run, refinements=args.refinements)
    doc = diag.to_dict()
    doc["certificate"] = {"gamma_h": run.certificate.gamma_h,
                          "theta_h": run.certificate.theta_h,
                          "rho_h": run.certificate.rho_h,
                          "kh_over_v": run.certificate.kh_over_v,
                          "verdict": run.certificate.verdict}
    from .certify import _json_17g

    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(_json_17g(doc) + "\n")
    print(f"gamma_ref = {diag.gamma_ref:.6g}  gamma_h = "
          f"{run.certificate.gamma_h:.6g}  ratio = {diag.efficiency_ratio:.4g}")
    return 0 if run.certificate.verdict == "certified" else 2


def cmd_meshgen(args):
    from . import mesh as msh

    m = msh.generate_unit_square(args.n,
                                 dirichlet_only=not args.neumann_bottom)
    msh.save_mesh(m, args.out)
    print(f"wrote {args.out}: {m.num_elements} elements, "
          f"{m.num_vertices} vertices")
    return 0


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    # cap BLAS pools before numpy spins them up; threadpoolctl later if loaded
    threads = "1"
    if "--threads" in argv:
        i = argv.index("--threads")
        if i + 1 < len(argv):
            threads = argv[i + 1]
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)

    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0

    from ._threads import set_blas_threads

    if getattr(args, "threads", None):
        set_blas_threads(args.threads)
    handlers = {"certify": cmd_certify, "oracle": cmd_oracle,
                "meshgen": cmd_meshgen}
    try:
        return handlers[args.command](args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
