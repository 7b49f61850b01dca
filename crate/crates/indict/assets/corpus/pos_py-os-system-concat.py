import os

def list_dir(user_input):
    os.system("ls " + user_input)
