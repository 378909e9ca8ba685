"""Optimize the arch benchmark; results go to out/arch by default."""
from _run import run

if __name__ == "__main__":
    run("arch")
