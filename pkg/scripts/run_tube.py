"""Optimize the tube benchmark; results go to out/tube by default."""
from _run import run

if __name__ == "__main__":
    run("tube")
