import os

def show(path):
    os.system(f"cat {path}")
