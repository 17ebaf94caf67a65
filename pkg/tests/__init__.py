"""
华为平板PDF阅读器测试包
"""
