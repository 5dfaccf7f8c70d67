"""How the heteroscedastic losses weight residuals.

Two things to see. First, for a fixed regression residual r the loss
0.5*exp(-s)*r^2 + s has its minimum at sigma^2 = r^2/2: the network can
"pay" a log penalty to discount voxels it cannot fit. Second, the scaled
softmax flattens class probabilities as the segmentation variance grows,
approaching a uniform distribution.
"""

import numpy as np

from hetmt.losses import regression_nll, scaled_softmax


def main():
    print("regression: loss over s for fixed residuals")
    s_grid = np.linspace(-4.0, 4.0, 2001)
    print(f"{'r':>5}  {'best s':>8}  {'ln(r^2/2)':>10}  {'attained':>9}"
          f"  {'1+ln(r^2/2)':>12}")
    for r in (0.5, 1.0, 2.0, 4.0):
        losses = [float(regression_nll(np.array([[r]]), np.array([[0.0]]),
                                       np.array([[s]]))[1].data)
                  for s in s_grid]
        k = int(np.argmin(losses))
        s_star = np.log(r * r / 2)
        print(f"{r:5.1f}  {s_grid[k]:8.3f}  {s_star:10.3f}  {losses[k]:9.3f}"
              f"  {1 + s_star:12.3f}")

    print("\nsegmentation: scaled softmax of logits [2, 0, -1]")
    logits = np.array([2.0, 0.0, -1.0]).reshape(3, 1, 1)
    print(f"{'sigma^2':>8}  probabilities")
    for var in (0.5, 1.0, 4.0, 100.0, 1e6):
        p = scaled_softmax(logits, np.array([[np.log(var)]]))[:, 0, 0]
        print(f"{var:8.1f}  [" + ", ".join(f"{x:.4f}" for x in p) + "]")
    print("large variance -> uniform: the model can flag unreliable voxels")


if __name__ == "__main__":
    main()
