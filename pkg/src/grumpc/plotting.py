"""SVG figures of closed-loop traces."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import ClosedLoopTrace  # noqa: E402


def plot_trace(trace: ClosedLoopTrace, path, u_bounds=(-1.0, 1.0), title: str | None = None) -> None:
    """Output against reference, applied input with its bounds, and optimal cost."""
    fig, axes = plt.subplots(3, 1, figsize=(8, 7), sharex=True)
    ax_y, ax_u, ax_j = axes
    for i in range(trace.y.shape[1]):
        ax_y.plot(trace.k, trace.y[:, i], label=f"y{i + 1}")
        ax_y.step(trace.k, trace.y_ref[:, i], where="post", linestyle="--",
                  label=f"reference {i + 1}")
    ax_y.set_ylabel("output")
    ax_y.legend(loc="best", fontsize="small")
    for i in range(trace.u.shape[1]):
        ax_u.step(trace.k, trace.u[:, i], where="post", label=f"u{i + 1}")
    for bound in u_bounds:
        ax_u.axhline(bound, color="gray", linewidth=0.8, linestyle=":")
    ax_u.set_ylabel("input")
    ax_j.semilogy(trace.k, trace.cost.clip(min=1e-16))
    ax_j.set_ylabel("optimal cost")
    ax_j.set_xlabel("step")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
