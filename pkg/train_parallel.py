# Usage : python train_parallel.py --parallel True/False --alphas 0.1,0.25 --seeds 0,1

from multiprocessing import Process
from functools import partial
import logging
import subprocess

from argparse import ArgumentParser

from src.utils import bool_flag, str2floats, str2ints, str2list

SCRIPT_NAME = "train.sh"
SCRIPT_PATH = f"./{SCRIPT_NAME}"

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
logger = logging.getLogger("train_parallel")


def run_train(alpha, seed, use_representation, max_iterations):
    group_name = f"a={alpha}-rep={use_representation}"
    logger.info("start %s (seed %s)", group_name, seed)

    command = f"{SCRIPT_PATH} {alpha} {seed} {use_representation} {max_iterations}"
    process = subprocess.Popen(command, stdout=subprocess.PIPE, stderr=subprocess.STDOUT, shell=True)
    stdoutdata, _ = process.communicate()

    if process.returncode != 0:
        logger.error("%s (seed %s) failed with exit code %d", group_name, seed, process.returncode)
    else:
        logger.info("%s (seed %s) done", group_name, seed)
    logger.debug("%s", stdoutdata.decode("utf-8"))
    return process.returncode


if __name__ == '__main__':
    parser = ArgumentParser(description="Pseudo-representation labeling sweeps")
    parser.add_argument("--parallel", type=bool_flag, default=False)
    parser.add_argument("--alphas", type=str2floats, default="0.1,0.25,0.5,1.0")
    parser.add_argument("--seeds", type=str2ints, default="0,1,2,3,4")
    parser.add_argument("--representations", type=str2list, default="autoencoder")
    parser.add_argument("--max_iterations", type=int, default=10)
    args = parser.parse_args()

    subprocess.run(f"chmod +x {SCRIPT_NAME}", shell=True, check=False)

    all_process = []
    for alpha in args.alphas:
        for use_representation in args.representations:
            for seed in args.seeds:
                task = partial(run_train, alpha, seed, use_representation, args.max_iterations)
                if not args.parallel:
                    task()
                else:
                    p = Process(target=task)
                    p.start()
                    all_process.append(p)

    for p in all_process: p.join()
