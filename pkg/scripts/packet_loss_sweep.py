"""Supported devices under forced packet loss (default loss 0.3).

    python3 scripts/packet_loss_sweep.py --run runs/desk --out runs/loss --jobs 4
"""

from scalability_sweep import main

if __name__ == "__main__":
    main(loss_probs=(0.0, 0.1, 0.3, 0.5))
