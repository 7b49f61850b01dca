import subprocess

def run(args):
    subprocess.run(args, check=True)
