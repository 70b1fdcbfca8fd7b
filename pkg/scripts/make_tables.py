"""Regenerate the tabulated kernel and coefficient files used by ``table_demo.yaml``."""
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "csvelab" / "configs"


def main():
    t = np.linspace(0.0, 2.0, 201)
    np.savetxt(OUT / "exp_kernel.csv", np.column_stack([t, np.exp(-t)]), delimiter=",",
               header="t,K", fmt="%.17g")
    x = np.linspace(-5.0, 5.0, 41)
    u = np.linspace(-1.0, 1.0, 5)
    X, U = np.meshgrid(x, u, indexing="ij")
    b = -X + 0.5 * U
    sigma = 0.2 + 0.1 * np.tanh(X)
    np.savez(OUT / "linear_table.npz", x=x, u=u, b=b, sigma=sigma)


if __name__ == "__main__":
    main()
