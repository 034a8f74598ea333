"""Train the small model shipped with the package (synthetic data, about ten minutes on one core)."""

import argparse
import logging
import time

from deal.data import piecewise_dataset
from deal.io import save_model, write_training_csv
from deal.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=1500)
    ap.add_argument("--output", default="src/deal/models/toy.dealm")
    ap.add_argument("--csv", default=None)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    n1 = int(args.steps * 0.8)
    cfg = TrainConfig(steps=args.steps, phases=((n1, 5e-3, 4e-3), (args.steps - n1, 2e-3, 1e-6)),
                      val_interval=100, seed=args.seed)
    data = piecewise_dataset(128, 64, seed=args.seed)
    t0 = time.time()

    def report(rec):
        if rec["psnr_val"] == rec["psnr_val"]:
            logging.info("step %5d  loss %.4f  val %.2f dB  (%.0f s)", rec["step"] + 1, rec["loss"],
                         rec["psnr_val"], time.time() - t0)

    result = train(data, cfg, callback=report)
    model = result.model.project((128, 128), tol=1e-8)
    save_model(model, args.output, extra={"trained_steps": args.steps, "best_step": result.best_step,
                                          "val_psnr_sigma25": result.best_psnr, "patch_size": cfg.patch_size})
    if args.csv:
        write_training_csv(args.csv, result.history)
    logging.info("saved %s (best step %d, %.2f dB)", args.output, result.best_step, result.best_psnr)


if __name__ == "__main__":
    main()
