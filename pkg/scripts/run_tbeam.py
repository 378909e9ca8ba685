"""Optimize the tbeam benchmark; results go to out/tbeam by default."""
from _run import run

if __name__ == "__main__":
    run("tbeam")
