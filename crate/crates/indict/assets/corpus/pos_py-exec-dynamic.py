def run_snippet(user_code):
    exec(user_code)
