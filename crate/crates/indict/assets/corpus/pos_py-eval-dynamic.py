def calculate(user_expression):
    return eval(user_expression)
