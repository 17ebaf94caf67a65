"""
属性测试包 - 使用 hypothesis 进行属性测试
"""
