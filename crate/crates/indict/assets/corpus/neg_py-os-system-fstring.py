import subprocess

def show(path):
    subprocess.run(["cat", path], check=True)
