def run_snippet():
    print("snippets are not executed")
