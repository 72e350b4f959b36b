"""Convert a MATPOWER case file into the plain subset read by ``gridverify``.

MATPOWER's distribution cases store branch impedances in Ohms and loads in
kVA, with MATLAB code at the bottom of the file doing the conversion. The
subset parser does not execute MATLAB, so this script applies the same
conversions and writes plain per-unit / MW matrices.

Usage: python scripts/convert_matpower.py case141.m out.m --power-factor 0.85
"""
import argparse
import math
import re


def _matrix(text, name):
    body = re.search(r"mpc\.%s\s*=\s*\[(.*?)\];" % name, text, re.S).group(1)
    rows = []
    for line in body.splitlines():
        line = line.split("%")[0].strip().rstrip(";")
        if line:
            rows.append([float(v) for v in line.split()])
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("source")
    ap.add_argument("dest")
    ap.add_argument("--power-factor", type=float, default=0.85)
    args = ap.parse_args()

    text = open(args.source).read()
    base_mva = float(re.search(r"mpc\.baseMVA\s*=\s*([\d.]+)", text).group(1))
    bus = _matrix(text, "bus")
    branch = _matrix(text, "branch")
    base_kv = bus[0][9]
    z_base = (base_kv * 1e3) ** 2 / (base_mva * 1e6)
    sin_phi = math.sin(math.acos(args.power_factor))

    out = [
        "% Converted from MATPOWER " + args.source.split("/")[-1],
        "% (c) MATPOWER developers, BSD 3-clause; original data from Khodr et al. (2008).",
        "% Branch r, x in p.u. on baseMVA; Pd, Qd in MW / MVAr (kVA * pf, kVA * sin(acos(pf))).",
        "mpc.baseMVA = %g;" % base_mva,
        "%\tbus_i\ttype\tPd\tQd",
        "mpc.bus = [",
    ]
    for row in bus:
        s_mva = row[2] / 1e3
        out.append("\t%d\t%d\t%.10g\t%.10g;" % (row[0], row[1], s_mva * args.power_factor, s_mva * sin_phi))
    out += ["];", "", "%\tfbus\ttbus\tr\tx", "mpc.branch = ["]
    for row in branch:
        out.append("\t%d\t%d\t%.12g\t%.12g;" % (row[0], row[1], row[2] / z_base, row[3] / z_base))
    out.append("];")
    with open(args.dest, "w") as fh:
        fh.write("\n".join(out) + "\n")


if __name__ == "__main__":
    main()
